#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "msinet/error.hpp"
#include "msinet/numerics/gradcheck.hpp"
#include "msinet/numerics/ops.hpp"
#include "msinet/numerics/tape.hpp"
#include "msinet/tcm.hpp"
#include "test_util.hpp"

using namespace msinet;
using msinet::testing::random_tensor;

namespace {

// Records with empty images; only identities matter for splitting.
IdentityDataset label_only_dataset(const std::vector<std::size_t>& images_per_id) {
  IdentityDataset ds;
  for (std::size_t id = 0; id < images_per_id.size(); ++id)
    for (std::size_t i = 0; i < images_per_id[id]; ++i) {
      IdentityRecord r;
      r.identity = 100 + id;
      r.view = i % 4;
      ds.records.push_back(r);
    }
  return ds;
}

std::vector<std::size_t> all_records(const IdentityDataset& ds) {
  std::vector<std::size_t> v(ds.records.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

SupernetConfig tiny_space() {
  SupernetConfig cfg;
  cfg.widths = {4, 4, 8};
  cfg.stem_width = 4;
  cfg.rho = 2;
  cfg.embedding_dim = 8;
  cfg.image_h = 32;
  cfg.image_w = 16;
  cfg.bottleneck = 2;
  return cfg;
}

SyntheticConfig tiny_data(std::size_t ids) {
  SyntheticConfig sc;
  sc.num_ids = ids;
  sc.heldout_ids = 0;
  sc.imgs_per_id = 8;
  sc.height = 32;
  sc.width = 16;
  sc.seed = 3;
  return sc;
}

std::uint64_t state_hash(std::span<Tensor<float>* const> tensors) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor<float>* t : tensors) {
    for (float v : t->values()) {
      unsigned char bytes[sizeof(float)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) h = (h ^ b) * 1099511628211ull;
    }
  }
  return h;
}

std::vector<Tensor<float>*> all_weight_state(SearchState& st) {
  std::vector<Tensor<float>*> out;
  for (auto& nt : st.net.named_tensors()) out.push_back(nt.tensor);  // includes running statistics
  if (st.classifier) out.push_back(&st.classifier->weight);
  return out;
}

}  // namespace

TEST_CASE("twin_split worked examples") {
  const auto ds = label_only_dataset(std::vector<std::size_t>(100, 4));
  const auto recs = all_records(ds);
  const auto s = twin_split(ds, recs, SplitConfig{60, 80, 1});
  CHECK(s.overlap == 40);
  CHECK(s.train_ids.size() == 60);
  CHECK(s.val_ids.size() == 80);
  CHECK(s.train.size() + s.val.size() == 400);

  const auto z = twin_split(ds, recs, SplitConfig{50, 50, 1});
  CHECK(z.overlap == 0);
  std::set<std::size_t> tr(z.train_ids.begin(), z.train_ids.end());
  for (std::size_t id : z.val_ids) CHECK(tr.count(id) == 0);

  // Odd image counts give train the extra image.
  const auto odd = label_only_dataset({5, 5, 5, 5});
  const auto full = twin_split(odd, all_records(odd), SplitConfig{100, 100, 0});
  CHECK(full.overlap == 4);
  CHECK(full.train.size() == 12);
  CHECK(full.val.size() == 8);

  CHECK_THROWS_AS(twin_split(label_only_dataset({3}), std::vector<std::size_t>{0, 1, 2}, SplitConfig{}), ArgumentError);
  CHECK_THROWS_AS(twin_split(label_only_dataset({3, 3}), std::vector<std::size_t>{0, 1, 2, 3, 4, 5},
                             SplitConfig{10, 100, 0}),
                  ArgumentError);
  CHECK_THROWS_AS(SplitConfig({0, 50, 0}).validate(), ArgumentError);
  CHECK_THROWS_AS(SplitConfig({50, 101, 0}).validate(), ArgumentError);
}

TEST_CASE("twin_split is image-disjoint with exact overlap counts for 1000 seeds") {
  std::mt19937_64 rng(77);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<std::size_t> counts(n);
    for (auto& c : counts) c = 2 + rng() % 5;
    const auto ds = label_only_dataset(counts);
    const auto recs = all_records(ds);
    const std::size_t tr = 20 + rng() % 81, va = 20 + rng() % 81;
    const std::size_t n_train = n * tr / 100;
    const std::size_t expected_overlap = tr + va > 100 ? (tr + va - 100) * n / 100 : 0;
    const std::size_t n_val = n - n_train + expected_overlap;
    if (n_train == 0 || n_val == 0 || n_val > n) {
      CHECK_THROWS_AS(twin_split(ds, recs, SplitConfig{double(tr), double(va), seed}), ArgumentError);
      continue;
    }
    const auto s = twin_split(ds, recs, SplitConfig{double(tr), double(va), seed});
    CHECK(s.overlap == expected_overlap);
    CHECK(s.train_ids.size() == n_train);
    CHECK(s.val_ids.size() == n_val);

    std::set<std::size_t> train(s.train.begin(), s.train.end()), val(s.val.begin(), s.val.end());
    CHECK(train.size() == s.train.size());
    for (std::size_t r : s.val) CHECK(train.count(r) == 0);
    CHECK(train.size() + val.size() == recs.size());

    std::set<std::size_t> tid(s.train_ids.begin(), s.train_ids.end());
    std::size_t both = 0;
    for (std::size_t id : s.val_ids) both += tid.count(id);
    CHECK(both == expected_overlap);
    // Each overlapped identity has images on both sides, split as evenly as possible.
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_id;
    for (std::size_t r : s.train) ++per_id[ds.records[r].identity].first;
    for (std::size_t r : s.val) ++per_id[ds.records[r].identity].second;
    for (const auto& [id, c] : per_id)
      if (c.first > 0 && c.second > 0) CHECK(c.first - c.second <= 1);
  }
}

TEST_CASE("memory initialization") {
  Tensor<double> one({2, 2}, {3, 4, 0, -2});
  const std::size_t labels[] = {7, 2};
  const auto bank = MemoryBank::init(one, labels);
  CHECK(bank.size() == 2);
  CHECK(bank.row(2) == 0);
  CHECK(bank.row(7) == 1);
  CHECK(bank.centroids[0] == 0.0);
  CHECK(bank.centroids[1] == doctest::Approx(-1.0));
  CHECK(bank.centroids[2] == doctest::Approx(0.6));
  CHECK(bank.centroids[3] == doctest::Approx(0.8));
  CHECK_THROWS_AS(bank.row(3), ArgumentError);

  Tensor<double> anti({2, 2}, {1, 0, -1, 0});
  const std::size_t same[] = {0, 0};
  const auto degenerate = MemoryBank::init(anti, same);
  CHECK(degenerate.centroids.all_finite());

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_tensor({30, 5}, rng);
    std::vector<std::size_t> lab(30);
    for (auto& l : lab) l = rng() % 6;
    const auto b = MemoryBank::init(f, lab);
    for (const auto& [cat, row] : b.label_index) {
      double mean[5] = {0, 0, 0, 0, 0};
      for (std::size_t i = 0; i < 30; ++i)
        if (lab[i] == cat)
          for (int k = 0; k < 5; ++k) mean[k] += f[i * 5 + k];
      double norm = 0;
      for (double m : mean) norm += m * m;
      norm = std::sqrt(norm);
      for (int k = 0; k < 5; ++k) CHECK(b.centroids[row * 5 + k] == doctest::Approx(mean[k] / norm).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(MemoryBank::init(Tensor<double>({0, 2}), std::vector<std::size_t>{}), ArgumentError);
}

TEST_CASE("memory update arithmetic, fixed point and unit norm") {
  Tensor<double> c({1, 2}, {1, 0});
  const std::size_t lab[] = {0};
  auto bank = MemoryBank::init(c, lab, 0.2);
  const double f[] = {0, 1};
  bank.update(f, 0);
  const double n = std::sqrt(0.2 * 0.2 + 0.8 * 0.8);
  CHECK(bank.centroids[0] == doctest::Approx(0.2 / n));
  CHECK(bank.centroids[1] == doctest::Approx(0.8 / n));

  const double same[] = {bank.centroids[0], bank.centroids[1]};
  bank.update(same, 0);
  CHECK(bank.centroids[0] == doctest::Approx(same[0]).epsilon(1e-15));
  CHECK(bank.centroids[1] == doctest::Approx(same[1]).epsilon(1e-15));
  CHECK_THROWS_AS(bank.update(same, 1), ArgumentError);

  // Repeated pulls toward e2 from e1, tracked as a two-component recurrence.
  auto pull = MemoryBank::init(c, lab, 0.2);
  double x = 1, y = 0;  // unnormalized oracle state
  for (int step = 0; step < 30; ++step) {
    pull.update(f, 0);
    x = 0.2 * x;
    y = 0.2 * y + 0.8;
    const double norm = std::sqrt(x * x + y * y);
    x /= norm, y /= norm;
    CHECK(pull.centroids[0] == doctest::Approx(x).epsilon(1e-12));
    CHECK(pull.centroids[1] == doctest::Approx(y).epsilon(1e-12));
  }

  std::mt19937_64 rng(8);
  auto big = MemoryBank::init(random_tensor({10, 16}, rng), std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  std::normal_distribution<double> g;
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> v(16);
    double s = 0;
    for (auto& e : v) e = g(rng), s += e * e;
    for (auto& e : v) e /= std::sqrt(s);
    big.update(v, rng() % 10);
  }
  for (std::size_t r = 0; r < 10; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 16; ++k) s += big.centroids[r * 16 + k] * big.centroids[r * 16 + k];
    worst = std::max(worst, std::abs(std::sqrt(s) - 1));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("contrastive loss values") {
  Tape<double> tape;
  {
    const std::size_t lab[] = {5};
    auto bank = MemoryBank::init(Tensor<double>({1, 3}, {0, 1, 0}), lab);
    auto f = tape.constant(Tensor<double>({1, 3}, {0.6, 0.8, 0}));
    CHECK(contrastive_loss(f, lab, bank).value()[0] == doctest::Approx(0.0));
  }
  {
    // f equals c_j and the other centroids are orthogonal to it.
    Tensor<double> eye({4, 4});
    for (int i = 0; i < 4; ++i) eye[i * 5] = 1;
    const std::size_t cats[] = {0, 1, 2, 3};
    const auto bank = MemoryBank::init(eye, cats, 0.2, 0.05);
    auto f = tape.constant(Tensor<double>({1, 4}, {0, 0, 1, 0}));
    const std::size_t lab[] = {2};
    const double expected = -std::log(std::exp(20.0) / (std::exp(20.0) + 3.0));
    CHECK(contrastive_loss(f, lab, bank).value()[0] == doctest::Approx(expected).epsilon(1e-12));
    const std::size_t unknown[] = {9};
    CHECK_THROWS_AS(contrastive_loss(f, unknown, bank), ArgumentError);
  }
}

TEST_CASE("contrastive loss: scale cancellation, non-negativity, gradient") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> cats{0, 1, 2, 3, 4};
    auto bank = MemoryBank::init(random_tensor({5, 6}, rng), cats, 0.2, 0.05);
    auto feats = random_tensor({3, 6}, rng);
    const std::size_t lab[] = {rng() % 5, rng() % 5, rng() % 5};
    Tape<double> tape;
    auto f = ops::l2_normalize(tape.constant(feats), 1);
    const double base = contrastive_loss(f, lab, bank).value()[0];
    CHECK(base >= 0);

    MemoryBank scaled = bank;
    scaled.tau *= 3.0;
    for (auto& v : scaled.centroids.values()) v *= 3.0;
    CHECK(contrastive_loss(f, lab, scaled).value()[0] == doctest::Approx(base).epsilon(1e-12));

    const double err = grad_check(
        [&](Tape<double>&, Var<double> x) { return contrastive_loss(ops::l2_normalize(x, 1), lab, bank); }, feats);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("learning-rate schedule") {
  const auto ref = Schedule::reference();
  CHECK(lr_at(0, 0.025, ref) == doctest::Approx(0.0025));
  CHECK(lr_at(5, 0.025, ref) == doctest::Approx(0.025 * (0.1 + 0.9 * 0.5)));
  CHECK(lr_at(10, 0.025, ref) == doctest::Approx(0.025));
  CHECK(lr_at(100, 0.025, ref) == doctest::Approx(0.025));
  CHECK(lr_at(150, 0.025, ref) == doctest::Approx(0.0025));
  CHECK(lr_at(224, 0.025, ref) == doctest::Approx(0.0025));
  CHECK(lr_at(225, 0.025, ref) == doctest::Approx(0.00025));
  CHECK(lr_at(320, 0.025, ref) == doctest::Approx(2.5e-5));
  CHECK(Schedule::scaled(350) == ref);
  const auto desk = Schedule::scaled(60);
  CHECK(desk.warmup_epochs == 2);
  CHECK(desk.milestones == std::vector<std::size_t>{26, 39, 51});
  CHECK(lr_at(59, 0.065, desk) == doctest::Approx(0.065e-3));
}

TEST_CASE("search phases touch only their own parameters") {
  const auto ds = generate_synthetic(tiny_data(4));
  SearchConfig cfg;
  for (auto scheme : {SearchScheme::Tcm, SearchScheme::CeOverlap}) {
    cfg.scheme = scheme;
    Rng rng(5);
    auto st = SearchState::create(tiny_space(), cfg, rng);
    const auto train = ds.indices(SplitSide::Train);
    auto ident = [](std::size_t id) { return id; };
    const std::vector<std::size_t> b1(train.begin(), train.begin() + 16), b2(train.begin() + 16, train.end());
    const auto tb = make_batch(ds, b1, ident, AugmentPolicy::None, 0, 0);
    const auto vb = make_batch(ds, b2, ident, AugmentPolicy::None, 0, 0);
    if (scheme == SearchScheme::CeOverlap) {
      st.classifier = LinearParams<float>::create(8, 4, false, 0.001, rng);
    } else {
      st.train_bank = build_memory(st, ds, b1, 0.2, 0.05);
      st.val_bank = build_memory(st, ds, b2, 0.2, 0.05);
    }
    Tensor<float>* alpha[] = {&st.alpha};
    for (int step = 0; step < 3; ++step) {
      const auto w_before = state_hash(all_weight_state(st));
      const auto a_before = state_hash(alpha);
      weight_phase(st, tb, scheme, 0.05);
      CHECK(state_hash(alpha) == a_before);
      CHECK(state_hash(all_weight_state(st)) != w_before);

      const auto w_mid = state_hash(all_weight_state(st));
      alpha_phase(st, vb, scheme, 0.01);
      CHECK(state_hash(all_weight_state(st)) == w_mid);
      CHECK(state_hash(alpha) != a_before);
    }
    // The whole step leaves the memories unit-norm.
    const auto banks = search_step(st, tb, vb, scheme, 0.05, 0.01);
    CHECK(std::isfinite(banks.train));
    CHECK(std::isfinite(banks.val));
  }
}

TEST_CASE("a constant shift of the loss leaves the alpha gradient unchanged") {
  const auto ds = generate_synthetic(tiny_data(4));
  Rng rng(2);
  SearchConfig cfg;
  auto st = SearchState::create(tiny_space(), cfg, rng);
  const auto train = ds.indices(SplitSide::Train);
  st.val_bank = build_memory(st, ds, train, 0.2, 0.05);
  const auto batch = make_batch(ds, train, [](std::size_t id) { return id; }, AugmentPolicy::None, 0, 0);
  st.net.set_update_running(false);
  std::vector<float> grads[2];
  for (int shifted = 0; shifted < 2; ++shifted) {
    st.alpha.zero_grad();
    Tape<float> tape;
    auto a = tape.param(st.alpha);
    tape.freeze_params(true);
    const auto out = supernet_forward(tape.constant(batch.images), a, st.net);
    auto loss = contrastive_loss(ops::l2_normalize(out.embedding, 1), batch.labels, st.val_bank);
    if (shifted) loss = ops::add_scalar(loss, 123.0f);
    tape.backward(loss);
    grads[shifted].assign(st.alpha.grad().begin(), st.alpha.grad().end());
  }
  CHECK(grads[0] == grads[1]);
}

TEST_CASE("two-identity toy search lowers the training loss") {
  const auto ds = generate_synthetic(tiny_data(2));
  Rng rng(9);
  SearchConfig cfg;
  auto st = SearchState::create(tiny_space(), cfg, rng);
  const auto train = ds.indices(SplitSide::Train);
  const auto split = twin_split(ds, train, SplitConfig{100, 100, 0});
  st.train_bank = build_memory(st, ds, split.train, 0.2, 0.05);
  st.val_bank = build_memory(st, ds, split.val, 0.2, 0.05);
  auto ident = [](std::size_t id) { return id; };
  const auto tb = make_batch(ds, split.train, ident, AugmentPolicy::None, 0, 0);
  const auto vb = make_batch(ds, split.val, ident, AugmentPolicy::None, 0, 0);
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    const auto l = search_step(st, tb, vb, SearchScheme::Tcm, 0.02, 0.002);
    if (step == 0) first = l.train;
    last = l.train;
  }
  CHECK(last < first);
}

TEST_CASE("run_search is deterministic and covers every scheme") {
  auto sc = tiny_data(6);
  const auto ds = generate_synthetic(sc);
  SearchConfig cfg;
  cfg.epochs = 2;
  cfg.p = 3;
  cfg.k = 2;
  cfg.seed = 4;
  const auto a = run_search(ds, tiny_space(), cfg);
  const auto b = run_search(ds, tiny_space(), cfg);
  CHECK(a.descriptor == b.descriptor);
  CHECK(a.alpha_history == b.alpha_history);
  CHECK(a.alpha_history.size() == 2);
  CHECK(a.epochs.size() == 2);
  CHECK(a.descriptor.config == tiny_space());
  for (auto scheme : {SearchScheme::TcmOverlap, SearchScheme::CeOverlap}) {
    cfg.scheme = scheme;
    const auto r = run_search(ds, tiny_space(), cfg);
    CHECK(r.alpha_history.size() == 2);
    CHECK(std::isfinite(r.epochs.back().train_loss));
  }
  CHECK(parse_search_scheme("ce_overlap") == SearchScheme::CeOverlap);
  CHECK_THROWS_AS(parse_search_scheme("darts"), ArgumentError);
  CHECK(effective_split(cfg).train_pct == 100);
}
