#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "cm3/eval.hpp"

using namespace cm3;

namespace {

MatD random_dense(Index rows, Index cols, Rng& rng) {
  MatD m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
  }
  return m;
}

Dataset scored_dataset(int users, int items, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (int u = 0; u < users; ++u) {
    // 2 train + 1 valid + 1 test interaction per user
    std::set<int> used;
    while (static_cast<int>(used.size()) < 4) used.insert(static_cast<int>(rng.index(items)));
    for (int i : used) pairs.emplace_back(std::to_string(u), std::to_string(i));
  }
  Dataset ds = build_dataset(pairs);
  ds.splits.assign(ds.interactions.size(), Split::train);
  std::map<int, int> count;
  for (std::size_t k = 0; k < ds.interactions.size(); ++k) {
    const int c = count[ds.interactions[k].user]++;
    if (c == 2) ds.splits[k] = Split::valid;
    if (c == 3) ds.splits[k] = Split::test;
  }
  return ds;
}

}  // namespace

TEST_CASE("recall is 1 when truth is contained in the top-k") {
  std::set<int> truth{1, 2};
  CHECK(recall_at_k({2, 1, 5}, truth, 3) == doctest::Approx(1.0));
}

TEST_CASE("recall is 0 for disjoint lists") {
  std::set<int> truth{7, 8};
  CHECK(recall_at_k({0, 1, 2}, truth, 3) == doctest::Approx(0.0));
}

TEST_CASE("recall counts partial hits against the full truth size") {
  std::set<int> truth{3, 4, 5};
  CHECK(recall_at_k({3, 0}, truth, 2) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("ndcg of a single truth item at rank 1 is 1") {
  std::set<int> truth{9};
  CHECK(ndcg_at_k({9, 1, 2}, truth, 3) == doctest::Approx(1.0));
}

TEST_CASE("ndcg of a single truth item at rank 2") {
  std::set<int> truth{9};
  CHECK(ndcg_at_k({1, 9, 2}, truth, 3) ==
        doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-9));
  CHECK(ndcg_at_k({1, 9}, truth, 2) == doctest::Approx(0.6309).epsilon(1e-3));
}

TEST_CASE("ndcg with truth at ranks 1 and 3") {
  std::set<int> truth{4, 6};
  const double expected = (1.0 + 0.5) / (1.0 + 1.0 / std::log2(3.0));
  CHECK(ndcg_at_k({4, 0, 6}, truth, 3) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(ndcg_at_k({4, 0, 6}, truth, 3) == doctest::Approx(0.9197).epsilon(1e-3));
}

TEST_CASE("ndcg is bounded by 1 and reaches it only for front-loaded truth") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> ranked{0, 1, 2, 3, 4, 5};
    rng.shuffle(ranked);
    std::set<int> truth;
    const int tsize = 1 + static_cast<int>(rng.index(3));
    while (static_cast<int>(truth.size()) < tsize) {
      truth.insert(static_cast<int>(rng.index(6)));
    }
    const int k = 1 + static_cast<int>(rng.index(5));
    const double v = ndcg_at_k(ranked, truth, k);
    CHECK(v <= 1.0 + 1e-12);
    // equality iff the first min(|truth|, k) ranks are all truth items
    const int ideal = std::min<int>(k, static_cast<int>(truth.size()));
    bool front = true;
    for (int r = 0; r < ideal; ++r) front = front && truth.count(ranked[r]) > 0;
    CHECK((v == doctest::Approx(1.0)) == front);
  }
}

TEST_CASE("rankings are invariant under positive rescaling of the user row") {
  Rng rng(2);
  const MatD e = random_dense(4, 5, rng);
  const MatD x = random_dense(7, 5, rng);
  for (int u = 0; u < 4; ++u) {
    const auto base = rank_items(e, x, u, {}, 7);
    MatD e2 = e;
    e2.row(u) *= 3.7;
    CHECK(base == rank_items(e2, x, u, {}, 7));
  }
}

TEST_CASE("evaluate gives perfect metrics when the truth item scores highest") {
  // 1 user, 3 items; truth = item 2, items 0 and 1 are training
  std::vector<std::pair<std::string, std::string>> pairs{
      {"u", "0"}, {"u", "1"}, {"u", "2"}};
  Dataset ds = build_dataset(pairs);
  ds.splits = {Split::train, Split::train, Split::test};
  MatD e(1, 2), x(3, 2);
  e << 1.0, 0.0;
  x << -1.0, 0.0, 0.5, 0.5, 0.9, 0.1;
  const auto res = evaluate(e, x, ds, Split::test, {1, 2});
  CHECK(res.users_evaluated == 1);
  CHECK(res.recall[0] == doctest::Approx(1.0));
  CHECK(res.ndcg[0] == doctest::Approx(1.0));
}

TEST_CASE("evaluate matches an exhaustive brute-force oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Dataset ds = scored_dataset(5, 6, 100 + seed);
    Rng rng(200 + seed);
    const MatD e = random_dense(ds.num_users(), 4, rng);
    const MatD x = random_dense(ds.num_items(), 4, rng);
    const auto res = evaluate(e, x, ds, Split::test, {1, 2, 3});
    const auto truth = truth_by_user(ds, Split::test);
    const auto train = truth_by_user(ds, Split::train);
    std::vector<double> recall(3, 0.0), ndcg(3, 0.0);
    int evaluated = 0;
    for (int u = 0; u < ds.num_users(); ++u) {
      if (truth[u].empty()) continue;
      std::vector<std::pair<double, int>> scored;
      for (int i = 0; i < ds.num_items(); ++i) {
        if (std::find(train[u].begin(), train[u].end(), i) != train[u].end()) continue;
        scored.emplace_back(e.row(u).dot(x.row(i)), i);
      }
      std::sort(scored.begin(), scored.end(), [](auto& a, auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      const std::set<int> ts(truth[u].begin(), truth[u].end());
      for (int kj = 0; kj < 3; ++kj) {
        const int k = kj + 1;
        int hits = 0;
        double dcg = 0.0;
        for (int r = 0; r < std::min<int>(k, static_cast<int>(scored.size())); ++r) {
          if (ts.count(scored[r].second)) {
            hits++;
            dcg += 1.0 / std::log2(r + 2.0);
          }
        }
        double idcg = 0.0;
        for (int r = 0; r < std::min<int>(k, static_cast<int>(ts.size())); ++r) {
          idcg += 1.0 / std::log2(r + 2.0);
        }
        recall[kj] += static_cast<double>(hits) / ts.size();
        ndcg[kj] += dcg / idcg;
      }
      evaluated++;
    }
    REQUIRE(evaluated == res.users_evaluated);
    for (int kj = 0; kj < 3; ++kj) {
      CHECK(res.recall[kj] == recall[kj] / evaluated);
      CHECK(res.ndcg[kj] == ndcg[kj] / evaluated);
    }
  }
}

TEST_CASE("training items never appear in recommendation lists") {
  Dataset ds = scored_dataset(6, 8, 3);
  Rng rng(4);
  const MatD e = random_dense(ds.num_users(), 4, rng);
  const MatD x = random_dense(ds.num_items(), 4, rng);
  const auto res = evaluate(e, x, ds, Split::valid, {3});
  const auto train = truth_by_user(ds, Split::train);
  for (const auto& [u, list] : res.topk) {
    for (int item : list) {
      CHECK(std::find(train[u].begin(), train[u].end(), item) == train[u].end());
    }
  }
}

TEST_CASE("measure_au is zero for degenerate configurations") {
  MatD items = MatD::Ones(5, 3);  // all identical -> uniformity 0
  MatD users(3, 3);
  users << 1, 1, 1, 1, 1, 1, 0, 1, 0;
  std::vector<Interaction> pos{{0, 0}, {1, 1}};  // perfectly aligned positives
  const auto m = measure_au(users, items, pos, 1.0, 7);
  CHECK(m.uniform_item == doctest::Approx(0.0));
  CHECK(m.align == doctest::Approx(0.0));
}

TEST_CASE("measure_au matches a double-loop oracle on the same sample") {
  Rng rng(5);
  const MatD e = random_dense(30, 6, rng);
  const MatD x = random_dense(25, 6, rng);
  std::vector<Interaction> pos;
  for (int k = 0; k < 40; ++k) {
    pos.push_back({static_cast<int>(rng.index(30)), static_cast<int>(rng.index(25))});
  }
  const std::uint64_t seed = 99;
  const double t = 1.5;
  const auto m = measure_au(e, x, pos, t, seed, 500);
  {
    double acc = 0.0;
    for (int k = 0; k < 40; ++k) {  // fewer positives than requested: all used
      const auto& p = pos[k];
      acc += (e.row(p.user) - x.row(p.item)).squaredNorm();
    }
    CHECK(m.align == doctest::Approx(acc / 40.0).epsilon(1e-12));
  }
  for (auto [reps, salt, got] :
       {std::tuple<const MatD*, std::uint64_t, double>{&e, 0x9d5f, m.uniform_user},
        std::tuple<const MatD*, std::uint64_t, double>{&x, 0x3a77, m.uniform_item}}) {
    const auto pairs = sample_pairs(static_cast<int>(reps->rows()), 500, seed ^ salt);
    double mx = -1e300;
    std::vector<double> ex;
    for (auto& [a, b] : pairs) {
      ex.push_back(-t * (reps->row(a) - reps->row(b)).squaredNorm());
      mx = std::max(mx, ex.back());
    }
    double sum = 0.0;
    for (double v : ex) sum += std::exp(v - mx);
    CHECK(got == doctest::Approx(mx + std::log(sum / ex.size())).epsilon(1e-12));
  }
}

TEST_CASE("measure_au is bit-stable across runs with one seed") {
  Rng rng(6);
  const MatD e = random_dense(12, 4, rng);
  const MatD x = random_dense(15, 4, rng);
  std::vector<Interaction> pos{{0, 1}, {2, 3}, {4, 5}, {11, 14}};
  const auto a = measure_au(e, x, pos, 2.0, 31, 100);
  const auto b = measure_au(e, x, pos, 2.0, 31, 100);
  CHECK(a.align == b.align);
  CHECK(a.uniform_user == b.uniform_user);
  CHECK(a.uniform_item == b.uniform_item);
}

TEST_CASE("item_cal_uniformity degenerates to item_uniformity at phi=1") {
  Rng rng(7);
  MatD x(10, 4);
  for (Index i = 0; i < 10; ++i) {
    for (Index j = 0; j < 4; ++j) x(i, j) = rng.normal();
    x.row(i).normalize();
  }
  MatD fused = MatD::Zero(10, 3);
  fused.col(0).setOnes();  // identical fused rows -> phi = 1 everywhere
  CHECK(item_cal_uniformity(x, fused, 1.3, 5) ==
        doctest::Approx(item_uniformity(x, 1.3, 5)).epsilon(1e-12));
}

TEST_CASE("antipodal 2-D embeddings export angles that differ by pi") {
  MatD x(2, 2);
  x << 1.0, 0.0, -1.0, 0.0;
  const auto out = export_angles(x);
  REQUIRE(out.angles.size() == 2);
  const double gap = std::abs(out.angles[0] - out.angles[1]);
  CHECK(std::min(gap, 2 * M_PI - gap) == doctest::Approx(M_PI).epsilon(1e-9));
}

TEST_CASE("planar inputs preserve pairwise angle gaps through the projection") {
  Rng rng(8);
  MatD x(5, 2);
  std::vector<double> raw;
  for (Index i = 0; i < 5; ++i) {
    const double a = rng.uniform(0, 2 * M_PI);
    raw.push_back(a);
    x(i, 0) = std::cos(a);
    x(i, 1) = std::sin(a);
  }
  const auto out = export_angles(x);
  // an orthogonal map of the plane preserves gaps up to sign
  auto wrap = [](double v) {
    while (v <= -M_PI) v += 2 * M_PI;
    while (v > M_PI) v -= 2 * M_PI;
    return std::abs(v);
  };
  for (int i = 1; i < 5; ++i) {
    const double expect = wrap(raw[i] - raw[0]);
    const double got = wrap(out.angles[i] - out.angles[0]);
    CHECK(got == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("a uniform ring of 8 points keeps uniform pi/4 gaps") {
  MatD x(8, 2);
  for (int i = 0; i < 8; ++i) {
    const double a = i * M_PI / 4.0;
    x(i, 0) = std::cos(a);
    x(i, 1) = std::sin(a);
  }
  auto out = export_angles(x);
  std::sort(out.angles.begin(), out.angles.end());
  for (int i = 1; i < 8; ++i) {
    CHECK(out.angles[i] - out.angles[i - 1] == doctest::Approx(M_PI / 4.0).epsilon(1e-6));
  }
}

TEST_CASE("identical items flag the projection as degenerate") {
  MatD x = MatD::Ones(4, 3);
  const auto out = export_angles(x);
  CHECK(out.degenerate);
  for (double a : out.angles) CHECK(a == doctest::Approx(out.angles[0]));
}
