// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; criteria 8 and 9 reuse the model of 7.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <unistd.h>

#include "cli.hpp"
#include "more/errors.hpp"
#include "more/explain.hpp"
#include "more/synthetic.hpp"

using namespace more;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using T = Tensor<double>;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [failed]");
  }
};

T random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  T::Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(lo, hi);
  return T(std::move(shape), std::move(v));
}

T probe(const T& y, std::uint64_t seed = 99) { return sum(mul(y, random_tensor(y.shape(), seed))); }

T unit_rows(Index n, Index d, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd m(n, d);
  for (Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
  m.rowwise().normalize();
  T::Array v(n * d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) v[i * d + j] = m(i, j);
  return T({n, d}, v);
}

template <typename S>
std::map<std::string, std::string> digests(const ParamList<S>& params) {
  std::map<std::string, std::string> out;
  for (const auto& p : params) {
    const auto& v = p.tensor.value();
    out[p.path] = digest_hex(std::string(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(S)));
  }
  return out;
}

std::set<std::string> changed_paths(const std::map<std::string, std::string>& a, const std::map<std::string, std::string>& b) {
  std::set<std::string> out;
  for (const auto& [path, d] : a)
    if (b.at(path) != d) out.insert(path);
  return out;
}

// --- brute-force metric oracles ---------------------------------------------------

double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0;
  long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        ++pairs;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / static_cast<double>(pairs);
}

double threshold_auprc(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thresholds = s;
  std::sort(thresholds.rbegin(), thresholds.rend());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const double positives = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double ap = 0, last_recall = 0;
  for (double t : thresholds) {
    double tp = 0, predicted = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        ++predicted;
        tp += y[i];
      }
    ap += (tp / positives - last_recall) * (tp / predicted);
    last_recall = tp / positives;
  }
  return ap;
}

double sorted_precision(const MatrixXd& q, const std::vector<int>& ql, const MatrixXd& c, const std::vector<int>& cl, int k) {
  double total = 0;
  for (Index i = 0; i < q.rows(); ++i) {
    std::vector<std::pair<double, Index>> sims;
    for (Index j = 0; j < c.rows(); ++j) sims.emplace_back(q.row(i).dot(c.row(j)) / (q.row(i).norm() * c.row(j).norm()), j);
    std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    int hits = 0;
    for (int r = 0; r < k; ++r) hits += cl[static_cast<std::size_t>(sims[static_cast<std::size_t>(r)].second)] == ql[static_cast<std::size_t>(i)];
    total += static_cast<double>(hits) / k;
  }
  return total / static_cast<double>(q.rows());
}

// --- rollout oracle ---------------------------------------------------------------------

MatrixXd softmax_rows(const MatrixXd& logits) {
  MatrixXd out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Eigen::ArrayXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    out.row(i) = (e / e.sum()).matrix().transpose();
  }
  return out;
}

RolloutLayer random_layer(int heads, int t, Rng& rng) {
  RolloutLayer l;
  for (int h = 0; h < heads; ++h) {
    MatrixXd logits(t, t), g(t, t);
    for (Index i = 0; i < logits.size(); ++i) {
      logits(i) = rng.normal() * 2;
      g(i) = rng.normal();
    }
    l.attention.push_back(softmax_rows(logits));
    l.gradient.push_back(g);
  }
  return l;
}

// --- the desk experiment shared by 7, 8 and 9 ---------------------------------------------

struct Desk {
  Dataset data;
  std::vector<ImageMotif> motifs;
  std::vector<std::size_t> train, test;
  PretrainResult result;
  double seconds = 0;
};

Desk& desk() {
  static std::optional<Desk> d;
  if (d) return *d;
  d.emplace();
  const auto t0 = Clock::now();
  SyntheticConfig sc;
  sc.seed = 7;
  d->data = gen_synthetic_triples(sc, &d->motifs);
  for (auto& s : d->data.samples) s = prepare_sample(s);
  std::tie(d->train, d->test) = stratified_split(d->data, 0.2, 7);
  Dataset train{d->data.class_names, {}};
  for (auto i : d->train) train.samples.push_back(d->data.samples[i]);
  TrainConfig tc;
  tc.max_epochs = 15;
  tc.batch_size = 32;
  tc.accumulation_steps = 4;
  tc.seed = 1;
  d->result = pretrain(train, ModelConfig{}, tc);
  d->seconds = seconds_since(t0);
  return *d;
}

std::vector<int> class_ids(const std::vector<EncodedSample>& s) {
  std::vector<int> out;
  for (const auto& x : s) out.push_back(x.class_id);
  return out;
}

double min_class_auroc(const MatrixXd& scores, const std::vector<int>& cls, std::string* report) {
  double worst = 1.0;
  for (Index c = 0; c < scores.cols(); ++c) {
    std::vector<double> s(static_cast<std::size_t>(scores.rows()));
    std::vector<int> y(s.size());
    for (Index i = 0; i < scores.rows(); ++i) {
      s[static_cast<std::size_t>(i)] = scores(i, c);
      y[static_cast<std::size_t>(i)] = cls[static_cast<std::size_t>(i)] == c;
    }
    const double a = auroc(s, y);
    if (report) *report += (c ? "/" : "") + fmt(a);
    worst = std::min(worst, a);
  }
  return worst;
}

// --- criteria ------------------------------------------------------------------------------

Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::vector<std::pair<const char*, std::function<T(const T&, std::uint64_t)>>> ops = {
      {"add", [](const T& x, auto s) { return probe(add(x, random_tensor({4}, s + 1))); }},
      {"sub", [](const T& x, auto s) { return probe(sub(random_tensor({3, 4}, s + 1), x)); }},
      {"mul", [](const T& x, auto s) { return probe(mul(x, random_tensor({3, 4}, s + 1))); }},
      {"mul_scalar", [](const T& x, auto s) { return probe(mul_scalar(random_tensor({2, 2}, s), slice(reshape(x, {12}), 0, 3, 4))); }},
      {"scale", [](const T& x, auto) { return probe(scale(x, -1.7)); }},
      {"exp", [](const T& x, auto) { return probe(exp(x)); }},
      {"log", [](const T& x, auto) { return probe(log(add(mul(x, x), T::full({4}, 0.5)))); }},
      {"relu", [](const T& x, auto) { return probe(relu(x)); }},
      {"gelu", [](const T& x, auto) { return probe(gelu(scale(x, 3.0))); }},
      {"sum", [](const T& x, auto) { return sum(mul(x, x)); }},
      {"mean", [](const T& x, auto) { return mean(mul(x, x)); }},
      {"softmax", [](const T& x, auto) { return probe(softmax(x, 0)); }},
      {"log_softmax", [](const T& x, auto) { return probe(log_softmax(scale(x, 4.0), -1)); }},
      {"layer_norm", [](const T& x, auto s) { return probe(layer_norm(x, random_tensor({4}, s + 1), random_tensor({4}, s + 2))); }},
      {"batch_norm", [](const T& x, auto s) {
         T rm = T::zeros({4}), rv = T::full({4}, 1.0);
         return probe(batch_norm(x, random_tensor({4}, s + 1), random_tensor({4}, s + 2), rm, rv, true));
       }},
      {"l2_normalize_rows", [](const T& x, auto) { return probe(l2_normalize_rows(x)); }},
      {"transpose", [](const T& x, auto) { return probe(transpose(x)); }},
      {"matmul", [](const T& x, auto s) { return probe(matmul(x, random_tensor({4, 5}, s + 1))); }},
      {"bmm", [](const T& x, auto s) { return probe(bmm(reshape(x, {3, 2, 2}), random_tensor({3, 2, 3}, s + 1))); }},
      {"bmm_nt", [](const T& x, auto) {
         T r = reshape(x, {3, 2, 2});
         return probe(bmm_nt(r, r));
       }},
      {"dot_nt", [](const T& x, auto s) { return probe(dot_nt(x, random_tensor({5, 4}, s + 1))); }},
      {"concat", [](const T& x, auto s) { return probe(concat<double>({x, random_tensor({3, 2}, s)}, 1)); }},
      {"slice", [](const T& x, auto) { return probe(slice(x, 1, 1, 3)); }},
      {"pick", [](const T& x, auto) { return probe(pick(x, {3, 0, 2})); }},
      {"embedding", [](const T& x, auto) { return probe(embedding(x, {2, 0, 2, 1})); }},
      {"expand", [](const T& x, auto) { return probe(expand(x, {2, 3, 4})); }},
      {"split_merge_heads", [](const T& x, auto) {
         T h = split_heads(reshape(x, {1, 3, 4}), 2);
         return probe(merge_heads(mul(h, h), 2));
       }},
      {"patchify", [](const T& x, auto) { return probe(patchify(reshape(x, {1, 2, 6}), 2)); }},
      {"conv1d", [](const T& x, auto s) {
         return probe(conv1d(reshape(x, {1, 2, 6}), random_tensor({3, 2, 3}, s + 1), random_tensor({3}, s + 2), 2));
       }},
      {"dropkey_attention", [](const T& x, auto s) {
         Rng rng(s);
         const T q = reshape(x, {2, 3, 2});
         return probe(dropkey_attention(q, random_tensor({2, 3, 2}, s + 1), random_tensor({2, 3, 2}, s + 2), 0.3, true, &rng).output);
       }},
      {"bce_with_logits", [](const T& x, auto) {
         return bce_with_logits(x, T({3, 4}, (Eigen::ArrayXd(12) << 1, 0, 1, -1, 0, 0, 1, 1, 0, 1, 0, 1).finished()));
       }},
      {"cross_entropy", [](const T& x, auto) { return cross_entropy(x, {0, 3, 1}); }},
      {"info_nce", [](const T& x, auto) { return info_nce_directional(reshape(slice(reshape(x, {12}), 0, 0, 9), {3, 3}), 0.5); }},
  };
  double worst_op = 0;
  std::string worst_name;
  for (const auto& [name, op] : ops)
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const double e = grad_check<double>([&](const T& v) { return op(v, seed); }, random_tensor({3, 4}, 1000 + seed));
      if (e > worst_op) {
        worst_op = e;
        worst_name = name;
      }
    }
  o.require(worst_op < 1e-4, std::to_string(ops.size()) + " ops max rel err " + fmt(worst_op) + " (" + worst_name + ")");

  // Full loss through both encoders, the text encoder and all heads.
  ModelConfig cfg;
  cfg.image = {2, 4, 64, 4, 0.1, 0.0};
  cfg.ecg = {2, 4, 64, 4, 0.1, 0.0};
  cfg.text = {2, 4, 64, 4, 0.0, 0.0};
  cfg.proj_hidden = 64;
  cfg.proj_dim = 32;
  cfg.vocab_size = 40;
  cfg.text_max_length = 24;
  const MoreModel<double> m(cfg, 3);
  const Index b = 4;
  const T images = random_tensor({b, 64, 64}, 1);
  const T ecg = random_tensor({b, 12, 1000}, 2);
  Rng ids_rng(5);
  std::vector<std::vector<TokenId>> ids;
  for (Index i = 0; i < b; ++i) {
    std::vector<TokenId> row{kClsId};
    for (int j = 0; j < 10; ++j) row.push_back(static_cast<TokenId>(ids_rng.uniform_int(4, 39)));
    row.push_back(kSepId);
    ids.push_back(row);
  }
  std::vector<T> trainable;
  for (const auto& p : m.parameters())
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
  const double full = grad_check_params<double>(
      [&] {
        Rng rng(11);
        return m.loss(images, ecg, ids, true, &rng);
      },
      trainable, 1e-6, 4, 7);
  o.require(full < 1e-4, "full loss over " + std::to_string(trainable.size()) + " tensors max rel err " + fmt(full));
  const double secs = seconds_since(t0);
  o.require(secs < 120, "runtime " + fmt(secs) + " s");
  return o;
}

Outcome loss_identities() {
  Outcome o;
  const T one({1, 1}, (Eigen::ArrayXd(1) << 0.37).finished());
  o.require(info_nce_directional(one, 0.07).item() == 0.0, "N=1 loss is 0");
  double worst = 0;
  for (Index n : {2, 4, 8})
    for (double c : {-0.4, 0.0, 0.9})
      worst = std::max(worst, std::abs(info_nce_directional(T::full({n, n}, c), 0.1).item() - std::log(static_cast<double>(n))));
  o.require(worst < 1e-9, "constant similarity gives ln N (err " + fmt(worst) + ")");

  bool symmetric = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const T za = unit_rows(8, 16, s), zb = unit_rows(8, 16, s + 100);
    const T inv = T::full({1}, 1.0 / 0.07);
    symmetric = symmetric && symmetric_pair_loss(za, zb, 0.07).item() == symmetric_pair_loss(zb, za, 0.07).item() &&
                symmetric_pair_loss(za, zb, inv).item() == symmetric_pair_loss(zb, za, inv).item();
  }
  o.require(symmetric, "pair loss symmetric bitwise");

  double perm_err = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Index n = 12;
    const T zt = unit_rows(n, 16, s), zx = unit_rows(n, 16, s + 50), ze = unit_rows(n, 16, s + 90);
    Rng rng(s);
    std::vector<Index> order;
    for (int i : rng.permutation(static_cast<int>(n))) order.push_back(i);
    auto permute = [&](const T& z) { return embedding(z, order); };
    perm_err = std::max(perm_err, std::abs(total_loss(zt, zx, ze, 0.1).item() -
                                           total_loss(permute(zt), permute(zx), permute(ze), 0.1).item()));
  }
  o.require(perm_err < 1e-12, "permutation invariance (err " + fmt(perm_err) + ")");
  return o;
}

Outcome dropkey_contract() {
  Outcome o;
  const T q = random_tensor({4, 6, 8}, 1), k = random_tensor({4, 6, 8}, 2), v = random_tensor({4, 6, 8}, 3);
  Rng rng(4);
  const auto train = dropkey_attention(q, k, v, 0.0, true, &rng);
  const T vanilla = bmm(softmax(scale(bmm_nt(q, k), 1.0 / std::sqrt(8.0)), -1), v);
  o.require((train.output.value() == vanilla.value()).all(), "rate 0 equals vanilla attention bitwise");

  bool endpoints = true;
  for (Index depth : {2, 4, 12})
    for (auto [a, b] : {std::pair{0.1, 0.0}, {0.3, 0.05}, {0.25, 0.0}})
      endpoints = endpoints && dropkey_schedule(0, depth, a, b) == a && dropkey_schedule(depth - 1, depth, a, b) == b;
  o.require(endpoints, "endpoints exact");

  auto second_differences = [](Index depth, double a, double b) {
    double worst = 0;
    for (Index l = 1; l + 1 < depth; ++l)
      worst = std::max(worst, std::abs(dropkey_schedule(l + 1, depth, a, b) - 2 * dropkey_schedule(l, depth, a, b) +
                                       dropkey_schedule(l - 1, depth, a, b)));
    return worst;
  };
  // Bitwise zero needs a representable progression; 0.1 -> 0 over 4 layers is not one.
  const double dyadic = std::max(second_differences(5, 0.25, 0.0), second_differences(3, 0.5, 0.25));
  o.require(dyadic == 0.0, "second differences exactly 0 on representable schedules");
  const VitConfig desk_cfg;
  const double desk_d2 = second_differences(desk_cfg.depth, desk_cfg.dropkey_rate_first, desk_cfg.dropkey_rate_last);
  o.require(desk_d2 <= 4 * std::numeric_limits<double>::epsilon() * desk_cfg.dropkey_rate_first,
            "desk schedule second differences " + fmt(desk_d2) + " (rounding level)");

  double worst_rate = 0;
  Rng mask_rng(5);
  for (double rate : {0.1, 0.2, 0.5}) {
    const auto mask = dropkey_mask(1, 100, 100, rate, mask_rng);
    long dropped = 0;
    for (const auto& row : mask[0]) dropped += std::count(row.begin(), row.end(), 1);
    worst_rate = std::max(worst_rate, std::abs(static_cast<double>(dropped) / 10000.0 - rate));
  }
  o.require(worst_rate <= 0.02, "mask rate within " + fmt(worst_rate) + " over 10000 draws");
  return o;
}

Outcome lora_contract() {
  Outcome o;
  // Same seed, same base weights: adapters are drawn after the base.
  VitConfig cfg{2, 4, 128, 4, 0.0, 0.0};
  const LoraConfig lc{4, 8.0, true};
  Rng r1(1), r2(1);
  const TextEncoder<double> plain(60, cfg, nullptr, r1);
  TextEncoder<double> fresh(60, cfg, &lc, r2);
  std::vector<std::vector<TokenId>> ids = {{kClsId, 5, 9, 30, kSepId}, {kClsId, 7, 7, kSepId, kPadId}};
  const T base_out = plain.forward(ids, false, nullptr);
  const T lora_out = fresh.forward(ids, false, nullptr);
  o.require((base_out.value() == lora_out.value()).all(), "adapted forward equals base at init");

  ParamList<double> params;
  fresh.collect("text", params);
  std::map<std::string, std::string> frozen_before;
  const auto initial = digests(params);
  for (const auto& p : params)
    if (!p.tensor.requires_grad()) frozen_before[p.path] = initial.at(p.path);
  AdamW<double> opt(params, AdamOptions{1e-2, 0.9, 0.999, 1e-8, 0.1});
  const T target = random_tensor({2, 128}, 3);
  for (int step = 0; step < 100; ++step) {
    const T out = fresh.forward(ids, true, nullptr);
    const T diff = sub(out, target);
    sum(mul(diff, diff)).backward();
    opt.step();
    opt.zero_grad();
  }
  const auto after = digests(params);
  bool frozen_same = true, adapters_moved = false;
  for (const auto& [path, d] : after) {
    if (frozen_before.contains(path)) frozen_same = frozen_same && frozen_before.at(path) == d;
    else adapters_moved = true;
  }
  o.require(frozen_same, std::to_string(frozen_before.size()) + " frozen tensors hash-identical after 100 steps");
  o.require(adapters_moved && fresh.forward(ids, false, nullptr).value().matrix() != base_out.value().matrix(),
            "adapters trained");

  // Documented config: d=256, 4 layers, r=4, vocabulary 1000, 512 positions.
  VitConfig doc{4, 4, 256, 4, 0.0, 0.0};
  const LoraConfig lora{4, 8.0, true};
  Rng r3(3);
  const TextEncoder<double> text(1000, doc, &lora, r3);
  ParamList<double> tp;
  text.collect("text", tp);
  const long d = 256, hidden = 4 * d, r = 4;
  const long layer = 2 * (d + d)                    // two layer norms
                     + 3 * d * d                    // q, k, v
                     + (d * d + d)                  // output projection
                     + (d * hidden + hidden) + (hidden * d + d)  // MLP
                     + 3 * (d * r + r * d);         // adapters
  const long total = 1000 * d + 512 * d + 4 * layer + 2 * d;
  const long trainable = 4 * 3 * (d * r + r * d);
  const double fraction = trainable_fraction(tp);
  o.require(parameter_count(tp) == total && parameter_count(tp, true) == trainable &&
                fraction == static_cast<double>(trainable) / static_cast<double>(total),
            "trainable fraction " + fmt(fraction) + " matches hand count");
  o.require(fraction < 0.02, "fraction below 2%");
  return o;
}

Outcome preprocessing() {
  Outcome o;
  Rng rng(2024);
  bool shape_ok = true, finite = true, in_range = true, extremes = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const double rate = std::vector<double>{100, 250, 360, 500, 1000}[static_cast<std::size_t>(rng.uniform_int(0, 4))];
    const Index len = static_cast<Index>(rate * rng.uniform(7.0, 13.0));
    EcgRecord raw{MatrixXd(12, len), rate};
    const double drift = rng.uniform(0, 3);
    for (Index l = 0; l < 12; ++l)
      for (Index i = 0; i < len; ++i)
        raw.leads(l, i) = rng.normal(0, rng.uniform(0.1, 5)) + drift * std::sin(0.3 * static_cast<double>(i) / rate);
    for (int n = static_cast<int>(rng.uniform_int(0, 20)); n > 0; --n)
      raw.leads(rng.uniform_int(0, 11), rng.uniform_int(0, len - 1)) = std::numeric_limits<double>::quiet_NaN();
    const EcgRecord out = ecg_pipeline(raw);
    shape_ok = shape_ok && out.leads.rows() == 12 && out.leads.cols() == 1000;
    finite = finite && out.leads.allFinite();
    in_range = in_range && out.leads.maxCoeff() <= 1.0 && out.leads.minCoeff() >= -1.0;
    for (Index l = 0; l < 12; ++l)
      if (out.leads.row(l).maxCoeff() > out.leads.row(l).minCoeff())
        extremes = extremes && out.leads.row(l).maxCoeff() == 1.0 && out.leads.row(l).minCoeff() == -1.0;
  }
  o.require(shape_ok, "1000 pipelines give 12x1000");
  o.require(finite, "NaN-free");
  o.require(in_range, "values in [-1,1]");

  for (int trial = 0; trial < 200; ++trial) {
    EcgRecord x{MatrixXd(12, 300), 100};
    for (Index i = 0; i < x.leads.size(); ++i) x.leads(i) = rng.normal(rng.uniform(-50, 50), rng.uniform(1e-3, 1e3));
    const EcgRecord y = ecg_minmax_per_lead(x);
    for (Index l = 0; l < 12; ++l) {
      Index lo, hi;
      x.leads.row(l).minCoeff(&lo);
      x.leads.row(l).maxCoeff(&hi);
      extremes = extremes && y.leads(l, lo) == -1.0 && y.leads(l, hi) == 1.0;
    }
  }
  o.require(extremes, "min-max maps extremes to exactly -1 and 1");

  AugmentConfig cfg;
  const int draws = 10000;
  int scaled = 0, jittered = 0, blurred = 0, warped = 0, permuted = 0;
  const ImageRecord img{MatrixXd::Constant(32, 32, 0.5), {}, {}};
  const EcgRecord ecg{MatrixXd::Zero(12, 16), 100};
  Rng g(99);
  for (int i = 0; i < draws; ++i) {
    AugmentTrace t;
    augment_xray(img, cfg, g, &t);
    augment_ecg(ecg, cfg, g, &t);
    scaled += t.scaled;
    jittered += t.jittered;
    blurred += t.blurred;
    warped += t.warped;
    permuted += t.permuted;
  }
  const double worst = std::max({std::abs(scaled / double(draws) - cfg.scale_prob), std::abs(jittered / double(draws) - cfg.jitter_prob),
                                 std::abs(blurred / double(draws) - cfg.blur_prob), std::abs(warped / double(draws) - cfg.warp_prob),
                                 std::abs(permuted / double(draws) - cfg.permute_prob)});
  o.require(worst <= 0.02, "augmentation fire rates within " + fmt(worst));
  return o;
}

Outcome metric_oracles() {
  Outcome o;
  Rng rng(6);
  bool auroc_exact = true;
  double auprc_err = 0, prec_err = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(4, 60));
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(s.size());
    const double grid = static_cast<double>(rng.uniform_int(2, 12));
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = std::round(rng.uniform(0, grid)) / grid;  // coarse grid forces ties
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    auroc_exact = auroc_exact && auroc(s, y) == pairwise_auroc(s, y);
    auprc_err = std::max(auprc_err, std::abs(auprc(s, y) - threshold_auprc(s, y)));

    const Index nq = rng.uniform_int(1, 8), nc = rng.uniform_int(5, 30), d = rng.uniform_int(2, 6);
    MatrixXd q(nq, d), c(nc, d);
    for (Index i = 0; i < q.size(); ++i) q(i) = rng.normal();
    for (Index i = 0; i < c.size(); ++i) c(i) = rng.normal();
    std::vector<int> ql(static_cast<std::size_t>(nq)), cl(static_cast<std::size_t>(nc));
    for (auto& l : ql) l = static_cast<int>(rng.uniform_int(0, 2));
    for (auto& l : cl) l = static_cast<int>(rng.uniform_int(0, 2));
    const int k = static_cast<int>(rng.uniform_int(1, 5));
    prec_err = std::max(prec_err, std::abs(precision_at_k(q, ql, c, cl, k) - sorted_precision(q, ql, c, cl, k)));
  }
  o.require(auroc_exact, "auroc equals pairwise oracle exactly");
  o.require(auprc_err < 1e-12, "auprc vs threshold oracle " + fmt(auprc_err));
  o.require(prec_err < 1e-12, "precision@k vs sort oracle " + fmt(prec_err));
  return o;
}

Outcome end_to_end() {
  Outcome o;
  Desk& d = desk();
  const auto t0 = Clock::now();
  const auto& log = d.result.log;
  double first = 0, last = 0;
  for (const auto& e : log)
    if (e.split == "train") {
      if (e.epoch == 1) first = e.loss;
      last = e.loss;
    }
  const double drop = 1.0 - last / first;
  o.require(d.result.epochs_run == 15, std::to_string(d.result.epochs_run) + " epochs");
  o.require(drop >= 0.30, "train loss " + fmt(first) + " -> " + fmt(last) + " (" + fmt(100 * drop) + "% drop)");

  const TrainedModel& m = d.result.best;
  const auto test = encode_samples(d.data, d.test, m.tokenizer, m.model.cfg.text_max_length);
  const auto cls = class_ids(test);
  const PromptBank bank = build_prompt_bank(m, d.data.class_names);
  const MatrixXd zx = embed_images(m, test), ze = embed_ecgs(m, test), zt = embed_reports(m, test);
  std::string img_report, ecg_report;
  const double img_auc = min_class_auroc(zero_shot_scores(zx, bank), cls, &img_report);
  const double ecg_auc = min_class_auroc(zero_shot_scores(ze, bank), cls, &ecg_report);
  o.require(test.size() == 60, std::to_string(test.size()) + " held-out triples");
  o.require(img_auc >= 0.90, "zero-shot image AUROC " + img_report);
  o.require(ecg_auc >= 0.90, "zero-shot ECG AUROC " + ecg_report);
  const double p_img = precision_at_k(zt, cls, zx, cls, 5), p_ecg = precision_at_k(zt, cls, ze, cls, 5);
  o.require(p_img >= 0.80, "P@5 text->image " + fmt(p_img));
  o.require(p_ecg >= 0.70, "P@5 text->ECG " + fmt(p_ecg));
  const double total = d.seconds + seconds_since(t0);
  o.require(total <= 1200, "runtime " + fmt(total) + " s");
  return o;
}

Outcome finetune_regimes() {
  Outcome o;
  Desk& d = desk();
  const TrainedModel& base = d.result.best;
  const auto before = digests(base.model.parameters());

  FinetuneConfig probe_cfg;
  probe_cfg.seed = 3;
  const FinetuneResult probe = finetune(base, d.data, d.train, probe_cfg);
  const auto probe_changed = changed_paths(before, digests(probe.trained.model.parameters()));
  bool encoder_same = true, only_head = true;
  for (const auto& p : probe_changed) {
    if (p.starts_with("image.")) encoder_same = false;
    if (!p.starts_with("image_head.")) only_head = false;
  }
  o.require(encoder_same && only_head, "linear probe leaves the encoder hash-identical");
  const auto test = encode_samples(d.data, d.test, base.tokenizer, base.model.cfg.text_max_length);
  std::string report;
  const double auc = min_class_auroc(classify(probe.trained, probe.classifier, test), class_ids(test), &report);
  o.require(auc >= 0.95, "probe AUROC " + report);

  FinetuneConfig qkv_cfg;
  qkv_cfg.mode = FinetuneMode::last_k_qkv;
  qkv_cfg.k_last_layers = 1;
  qkv_cfg.epochs = 3;
  qkv_cfg.seed = 3;
  const FinetuneResult qkv = finetune(base, d.data, d.train, qkv_cfg);
  const auto qkv_changed = changed_paths(before, digests(qkv.trained.model.parameters()));
  const std::string last = "image.blocks." + std::to_string(base.model.cfg.image.depth - 1) + ".attn.";
  const std::set<std::string> qkv_paths = {last + "q.weight", last + "k.weight", last + "v.weight"};
  bool allowed = true;
  for (const auto& p : qkv_changed) allowed = allowed && (qkv_paths.contains(p) || p.starts_with("image_head."));
  bool all_qkv = true;
  for (const auto& p : qkv_paths) all_qkv = all_qkv && qkv_changed.contains(p);
  o.require(allowed && all_qkv, "last_k_qkv(1) changes only last-layer q/k/v and head (" + std::to_string(qkv_changed.size()) +
                                    " tensors)");
  return o;
}

Outcome explainability() {
  Outcome o;
  // Fixed two-layer, two-head trace over three tokens, expanded by hand.
  RolloutLayer l1, l2;
  l1.attention = {(MatrixXd(3, 3) << 0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.25, 0.25, 0.5).finished(),
                  (MatrixXd(3, 3) << 0.2, 0.2, 0.6, 0.4, 0.4, 0.2, 0.1, 0.7, 0.2).finished()};
  l1.gradient = {(MatrixXd(3, 3) << 1.0, -2.0, 0.5, 0.3, 0.2, -1.0, 2.0, 1.0, -0.5).finished(),
                 (MatrixXd(3, 3) << -0.5, 1.5, 1.0, 0.0, 2.0, 0.4, 1.0, -1.0, 3.0).finished()};
  l2.attention = {(MatrixXd(3, 3) << 0.6, 0.2, 0.2, 0.3, 0.3, 0.4, 0.05, 0.9, 0.05).finished(),
                  (MatrixXd(3, 3) << 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.5, 0.0, 0.5, 0.2, 0.3, 0.5).finished()};
  l2.gradient = {(MatrixXd(3, 3) << 0.7, 1.2, -0.3, -1.0, 0.5, 2.5, 0.4, 0.4, 0.4).finished(),
                 (MatrixXd(3, 3) << 2.0, -0.6, 0.9, 1.1, 1.1, -2.0, 0.0, 0.3, 1.7).finished()};
  auto positive_mean = [](const RolloutLayer& l) {
    MatrixXd c = MatrixXd::Zero(3, 3);
    for (int h = 0; h < 2; ++h)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) c(i, j) += std::max(0.0, l.gradient[h](i, j) * l.attention[h](i, j)) / 2;
    return c;
  };
  auto row_normalized = [](MatrixXd m) {
    for (int i = 0; i < 3; ++i) m.row(i) /= m.row(i).sum();
    return m;
  };
  const MatrixXd eye = MatrixXd::Identity(3, 3);
  const MatrixXd r1 = row_normalized(eye + positive_mean(l1));
  const MatrixXd r2 = row_normalized((eye + positive_mean(l2)) * r1);
  VectorXd expected = r2.row(0).transpose();
  expected[0] -= 1.0;
  expected = expected.cwiseMax(0.0);
  const double err = (relevance_rollout({l1, l2}) - expected).cwiseAbs().maxCoeff();
  o.require(err < 1e-10, "2-layer trace matches the hand product (err " + fmt(err) + ")");

  Rng rng(9);
  bool nonneg = true;
  for (int trial = 0; trial < 100; ++trial) {
    const int layers = static_cast<int>(rng.uniform_int(1, 6)), t = static_cast<int>(rng.uniform_int(2, 17));
    std::vector<RolloutLayer> trace;
    for (int l = 0; l < layers; ++l) trace.push_back(random_layer(static_cast<int>(rng.uniform_int(1, 4)), t, rng));
    nonneg = nonneg && relevance_rollout(trace).minCoeff() >= 0.0;
  }
  o.require(nonneg, "non-negative on 100 random traces");

  Desk& d = desk();
  const TrainedModel& m = d.result.best;
  const PromptBank bank = build_prompt_bank(m, d.data.class_names);
  const auto test = encode_samples(d.data, d.test, m.tokenizer, m.model.cfg.text_max_length);
  const double patch = static_cast<double>(ImageEncoder<float>::kPatch);
  int hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const ImageMotif& motif = d.motifs[d.test[i]];
    const auto map = explain_image(m, test[i], class_target(bank, d.data.class_names[static_cast<std::size_t>(test[i].class_id)]));
    const auto [r, c] = hottest_patch(map);
    // Motif region: disc of radius 2 sigma around the blob centre. The patch
    // covers pixel centres [16r, 16r + 15], i.e. edges at -0.5 / +15.5.
    const double y0 = static_cast<double>(r) * patch - 0.5, x0 = static_cast<double>(c) * patch - 0.5;
    const double ny = std::clamp(motif.y, y0, y0 + patch), nx = std::clamp(motif.x, x0, x0 + patch);
    hits += std::hypot(ny - motif.y, nx - motif.x) <= 2 * motif.sigma;
  }
  const double rate = static_cast<double>(hits) / static_cast<double>(test.size());
  o.require(rate >= 0.70, "hot patch on the motif for " + std::to_string(hits) + "/" + std::to_string(test.size()) + " samples");
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return "<missing>";
  return {std::istreambuf_iterator<char>(f), {}};
}

int more_cmd(std::vector<std::string> args, std::string* out_text = nullptr) {
  args.insert(args.begin(), "more");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << "more " << args[1] << ": " << err.str();
  if (out_text) *out_text = out.str();
  return code;
}

Outcome reproducibility() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / ("more_accept_" + std::to_string(::getpid()));
  const std::vector<std::string> artifacts = {"model.ckpt", "probe.ckpt", "train.log", "scores.tsv", "labels.tsv",
                                              "metrics.tsv", "heat.pgm", "ecg.tsv"};
  auto pipeline = [&](const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream(dir / "run.cfg") << "[data]\nmanifest = data/manifest.tsv\n\n[model]\n"
                                      "image.depth = 1\nimage.heads = 2\nimage.dim = 32\n"
                                      "ecg.depth = 1\necg.heads = 2\necg.dim = 32\n"
                                      "text.depth = 1\ntext.heads = 2\ntext.dim = 32\n"
                                      "lora.rank = 2\ntext_max_length = 64\nproj_hidden = 32\nproj_dim = 16\n\n"
                                      "[train]\nmax_epochs = 2\nbatch_size = 8\naccumulation_steps = 2\nseed = 4\n"
                                      "finetune.epochs = 2\nfinetune.batch_size = 8\n";
    const std::string d = dir.string();
    bool ok = more_cmd({"synth", "--classes", "3", "--per-class", "12", "--seed", "3", "--out", d + "/data"}) == 0;
    ok = ok && more_cmd({"pretrain", "--config", d + "/run.cfg", "--out", d + "/model.ckpt", "--heldout", d + "/held",
                         "--log", d + "/train.log"}) == 0;
    ok = ok && more_cmd({"finetune", "--ckpt", d + "/model.ckpt", "--manifest", d + "/data/manifest.tsv", "--config",
                         d + "/run.cfg", "--out", d + "/probe.ckpt", "--log", d + "/probe.log"}) == 0;
    ok = ok && more_cmd({"zeroshot", "--ckpt", d + "/model.ckpt", "--manifest", d + "/held/manifest.tsv", "--prepared",
                         "--out", d + "/scores.tsv", "--labels-out", d + "/labels.tsv"}) == 0;
    ok = ok && more_cmd({"eval", "--scores", d + "/scores.tsv", "--labels", d + "/labels.tsv", "--out", d + "/metrics.tsv"}) == 0;
    if (!ok) return false;
    const Dataset data = load_dataset(dir / "data/manifest.tsv");
    const auto& s = data.samples.front();
    ok = more_cmd({"explain", "--ckpt", d + "/model.ckpt", "--input", (dir / "data" / s.image_path).string(), "--class",
                   data.class_names.front(), "--out", d + "/heat.pgm"}) == 0;
    return ok && more_cmd({"explain", "--ckpt", d + "/model.ckpt", "--input", (dir / "data" / s.ecg_path).string(),
                           "--class", data.class_names.front(), "--out", d + "/ecg.tsv"}) == 0;
  };
  const bool ran = pipeline(root / "a") && pipeline(root / "b");
  o.require(ran, "two CLI pipeline runs completed");
  if (ran) {
    for (const auto& name : artifacts) {
      const std::string a = slurp(root / "a" / name), b = slurp(root / "b" / name);
      o.require(a == b && a != "<missing>", name + " identical (" + std::to_string(a.size()) + " bytes)");
    }
  }
  fs::remove_all(root);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"gradient integrity", gradients},    {"loss identities", loss_identities},
      {"DropKey contract", dropkey_contract}, {"LoRA contract", lora_contract},
      {"preprocessing conformance", preprocessing}, {"metric oracles", metric_oracles},
      {"end-to-end desk experiment", end_to_end}, {"fine-tune regimes", finetune_regimes},
      {"explainability", explainability},  {"reproducibility", reproducibility},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.contains(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << ", "
              << fmt(seconds_since(t0)) << " s): " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
