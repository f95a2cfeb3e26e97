#include "manipshield/lds_probe.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "manipshield/error.hpp"
#include "manipshield/parallel.hpp"
#include "manipshield/rng.hpp"

namespace manipshield::lds {

using features::FeatureDump;
using features::SampleLabel;

double pairwise_sum(std::span<const double> values) {
  constexpr std::size_t kLeaf = 8;
  if (values.size() <= kLeaf) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

double gaussian_kl(double mu1, double var1, double mu2, double var2) {
  if (!(var1 > 0.0) || !(var2 > 0.0)) {
    fail(ErrorKind::kDomain, "gaussian_kl requires positive variances");
  }
  const double diff = mu1 - mu2;
  const double kl = 0.5 * std::log(var2 / var1) + (var1 + diff * diff) / (2.0 * var2) - 0.5;
  // Rounding can leave a tiny negative residue for identical inputs.
  return kl < 0.0 ? 0.0 : kl;
}

std::vector<std::uint8_t> class_flags(std::span<const SampleLabel> labels) {
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i].is_manipulated ? 1 : 0;
  return out;
}

namespace {

struct ClassIndex {
  std::vector<std::size_t> real;
  std::vector<std::size_t> manipulated;
};

ClassIndex split_classes(const FeatureDump& dump, std::span<const std::uint8_t> flags) {
  if (flags.size() != dump.num_samples()) {
    fail(ErrorKind::kShape, "label count " + std::to_string(flags.size()) +
                                " does not match dump sample count " +
                                std::to_string(dump.num_samples()));
  }
  ClassIndex idx;
  for (std::size_t s = 0; s < flags.size(); ++s) {
    (flags[s] ? idx.manipulated : idx.real).push_back(s);
  }
  return idx;
}

void check_inputs(const FeatureDump& dump, const ClassIndex& idx, const Params& params) {
  if (params.bins < 2) fail(ErrorKind::kParameter, "bins must be at least 2");
  if (!(params.epsilon >= 0.0)) fail(ErrorKind::kParameter, "epsilon must be non-negative");
  if (idx.real.size() < 2 || idx.manipulated.size() < 2) {
    fail(ErrorKind::kClassBalance,
         "both classes need at least 2 samples (real " + std::to_string(idx.real.size()) +
             ", manipulated " + std::to_string(idx.manipulated.size()) + ")");
  }
  if (dump.num_layers() == 0 || dump.dim() == 0) {
    fail(ErrorKind::kShape, "dump has no layers or no dimensions");
  }
}

struct Moments {
  double mean;
  double variance;
};

Moments moments(std::span<const double> x, std::vector<double>& scratch) {
  const double n = static_cast<double>(x.size());
  const double mean = pairwise_sum(x) / n;
  scratch.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = x[i] - mean;
    scratch[i] = c * c;
  }
  return {mean, pairwise_sum(scratch) / n};
}

double binned_entropy(std::span<const double> x, std::size_t bins,
                      std::vector<std::size_t>& counts) {
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) return 0.0;
  counts.assign(bins, 0);
  const double scale = static_cast<double>(bins) / (hi - lo);
  for (double v : x) {
    auto b = static_cast<std::size_t>((v - lo) * scale);
    if (b >= bins) b = bins - 1;
    ++counts[b];
  }
  const double n = static_cast<double>(x.size());
  double h = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return h;
}

// Per-thread buffers for one layer.
struct LayerScratch {
  std::vector<double> real;         // [dim][sample] for the real class
  std::vector<double> manipulated;  // [dim][sample] for the manipulated class
  std::vector<double> pooled;
  std::vector<double> sq;
  std::vector<std::size_t> counts;
  std::vector<double> kl_d, ldr_d, h_d;
};

void gather(const FeatureDump& dump, std::size_t layer, std::span<const std::size_t> samples,
            std::vector<double>& out) {
  const std::size_t n = samples.size();
  const std::size_t dim = dump.dim();
  out.resize(dim * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = dump.row(samples[i], layer);
    for (std::size_t d = 0; d < dim; ++d) out[d * n + i] = r[d];
  }
}

void compute_layer(const FeatureDump& dump, const ClassIndex& idx, std::size_t layer,
                   const Params& params, LayerScratch& s, double& kl, double& ldr,
                   double& entropy) {
  const std::size_t dim = dump.dim();
  const std::size_t nr = idx.real.size();
  const std::size_t na = idx.manipulated.size();
  gather(dump, layer, idx.real, s.real);
  gather(dump, layer, idx.manipulated, s.manipulated);
  s.kl_d.resize(dim);
  s.ldr_d.resize(dim);
  s.h_d.resize(dim);
  s.pooled.resize(nr + na);
  for (std::size_t d = 0; d < dim; ++d) {
    const std::span<const double> xr(s.real.data() + d * nr, nr);
    const std::span<const double> xa(s.manipulated.data() + d * na, na);
    const Moments mr = moments(xr, s.sq);
    const Moments ma = moments(xa, s.sq);
    const double vr = std::max(mr.variance, kVarianceFloor);
    const double va = std::max(ma.variance, kVarianceFloor);
    s.kl_d[d] = gaussian_kl(mr.mean, vr, ma.mean, va);
    const double diff = mr.mean - ma.mean;
    s.ldr_d[d] = diff * diff / (mr.variance + ma.variance + params.epsilon);
    std::copy(xr.begin(), xr.end(), s.pooled.begin());
    std::copy(xa.begin(), xa.end(), s.pooled.begin() + static_cast<std::ptrdiff_t>(nr));
    s.h_d[d] = binned_entropy(s.pooled, params.bins, s.counts);
  }
  const double inv_dim = 1.0 / static_cast<double>(dim);
  kl = pairwise_sum(s.kl_d) * inv_dim;
  ldr = pairwise_sum(s.ldr_d) * inv_dim;
  entropy = pairwise_sum(s.h_d) * inv_dim;
}

LayerReport metrics_impl(const FeatureDump& dump, const ClassIndex& idx, const Params& params,
                         bool parallel) {
  check_inputs(dump, idx, params);
  const std::size_t layers = dump.num_layers();
  LayerReport report;
  report.bins = params.bins;
  report.epsilon = params.epsilon;
  report.kl.resize(layers);
  report.ldr.resize(layers);
  report.entropy.resize(layers);
  const auto n = static_cast<std::int64_t>(layers);

#pragma omp parallel if (parallel && layers > 1)
  {
    LayerScratch scratch;
#pragma omp for schedule(dynamic, 1)
    for (std::int64_t l = 0; l < n; ++l) {
      const auto li = static_cast<std::size_t>(l);
      compute_layer(dump, idx, li, params, scratch, report.kl[li], report.ldr[li],
                    report.entropy[li]);
    }
  }
  return report;
}

}  // namespace

ClassMoments class_moments(const FeatureDump& dump, std::span<const std::uint8_t> manipulated,
                           bool which) {
  const ClassIndex idx = split_classes(dump, manipulated);
  const auto& members = which ? idx.manipulated : idx.real;
  if (members.empty()) fail(ErrorKind::kClassBalance, "class has no samples");
  ClassMoments m;
  m.manipulated = which;
  m.num_layers = dump.num_layers();
  m.dim = dump.dim();
  m.mean.resize(m.num_layers * m.dim);
  m.variance.resize(m.num_layers * m.dim);
  std::vector<double> buf, sq;
  for (std::size_t l = 0; l < m.num_layers; ++l) {
    gather(dump, l, members, buf);
    for (std::size_t d = 0; d < m.dim; ++d) {
      const Moments mo = moments(std::span<const double>(buf.data() + d * members.size(),
                                                         members.size()),
                                 sq);
      m.mean[l * m.dim + d] = mo.mean;
      m.variance[l * m.dim + d] = mo.variance;
    }
  }
  return m;
}

LayerReport layer_metrics(const FeatureDump& dump, std::span<const std::uint8_t> manipulated,
                          const Params& params) {
  return metrics_impl(dump, split_classes(dump, manipulated), params, true);
}

LayerReport layer_metrics(const FeatureDump& dump, std::span<const SampleLabel> labels,
                          const Params& params) {
  const auto flags = class_flags(labels);
  return layer_metrics(dump, flags, params);
}

LayerReport layer_metrics_serial(const FeatureDump& dump,
                                 std::span<const std::uint8_t> manipulated,
                                 const Params& params) {
  const ClassIndex idx = split_classes(dump, manipulated);
  check_inputs(dump, idx, params);
  const std::size_t layers = dump.num_layers();
  const std::size_t dim = dump.dim();
  const std::size_t bins = params.bins;
  LayerReport report;
  report.bins = bins;
  report.epsilon = params.epsilon;

  for (std::size_t l = 0; l < layers; ++l) {
    double kl_sum = 0.0, ldr_sum = 0.0, h_sum = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      double stats[2][2];  // [class][mean, var]
      for (int c = 0; c < 2; ++c) {
        const auto& members = c ? idx.manipulated : idx.real;
        double sum = 0.0;
        for (std::size_t s : members) sum += dump.at(s, l, d);
        const double mean = sum / static_cast<double>(members.size());
        double ss = 0.0;
        for (std::size_t s : members) {
          const double c2 = dump.at(s, l, d) - mean;
          ss += c2 * c2;
        }
        stats[c][0] = mean;
        stats[c][1] = ss / static_cast<double>(members.size());
      }
      const double vr = std::max(stats[0][1], kVarianceFloor);
      const double va = std::max(stats[1][1], kVarianceFloor);
      kl_sum += gaussian_kl(stats[0][0], vr, stats[1][0], va);
      const double diff = stats[0][0] - stats[1][0];
      ldr_sum += diff * diff / (stats[0][1] + stats[1][1] + params.epsilon);

      double lo = dump.at(0, l, d), hi = lo;
      for (std::size_t s = 0; s < dump.num_samples(); ++s) {
        lo = std::min<double>(lo, dump.at(s, l, d));
        hi = std::max<double>(hi, dump.at(s, l, d));
      }
      double h = 0.0;
      if (hi > lo) {
        std::vector<std::size_t> counts(bins, 0);
        const double width = (hi - lo) / static_cast<double>(bins);
        for (std::size_t s = 0; s < dump.num_samples(); ++s) {
          const double v = dump.at(s, l, d);
          std::size_t b = 0;
          while (b + 1 < bins && v >= lo + static_cast<double>(b + 1) * width) ++b;
          ++counts[b];
        }
        for (std::size_t c : counts) {
          if (c == 0) continue;
          const double p = static_cast<double>(c) / static_cast<double>(dump.num_samples());
          h -= p * std::log2(p);
        }
      }
      h_sum += h;
    }
    report.kl.push_back(kl_sum / static_cast<double>(dim));
    report.ldr.push_back(ldr_sum / static_cast<double>(dim));
    report.entropy.push_back(h_sum / static_cast<double>(dim));
  }
  return report;
}

std::vector<double> zscores(std::span<const double> values) {
  std::vector<double> z(values.size(), 0.0);
  if (values.empty()) return z;
  const double n = static_cast<double>(values.size());
  const double mean = pairwise_sum(values) / n;
  std::vector<double> sq(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) sq[i] = (values[i] - mean) * (values[i] - mean);
  const double sd = std::sqrt(pairwise_sum(sq) / n);
  // Treat a spread at rounding level relative to the values as constant.
  const double scale = std::max(std::abs(mean), 1e-300);
  if (!(sd > 1e-14 * scale)) return z;
  for (std::size_t i = 0; i < values.size(); ++i) z[i] = (values[i] - mean) / sd;
  return z;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

LayerReport saliency_and_select(LayerReport report) {
  const std::size_t layers = report.kl.size();
  if (layers == 0 || report.ldr.size() != layers || report.entropy.size() != layers) {
    fail(ErrorKind::kShape, "layer report lists must be populated with equal length");
  }
  report.z_kl = zscores(report.kl);
  report.z_ldr = zscores(report.ldr);
  report.z_entropy = zscores(report.entropy);
  report.saliency.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    report.saliency[l] = report.z_kl[l] + report.z_ldr[l] + report.z_entropy[l];
  }
  report.selected_layer = argmax(report.saliency);
  return report;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (a + 1) + 0xBF58476D1CE4E5B9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<std::size_t> sample_without_replacement(std::span<const std::size_t> pool,
                                                    std::size_t k, Rng& rng) {
  std::vector<std::size_t> items(pool.begin(), pool.end());
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_index(rng, items.size() - i));
    std::swap(items[i], items[j]);
  }
  items.resize(k);
  std::sort(items.begin(), items.end());
  return items;
}

std::size_t modal_value(std::span<const std::size_t> xs, std::size_t& count) {
  std::map<std::size_t, std::size_t> freq;
  for (std::size_t x : xs) ++freq[x];
  std::size_t best = 0;
  count = 0;
  for (const auto& [value, c] : freq) {
    if (c > count) {
      best = value;
      count = c;
    }
  }
  return best;
}

}  // namespace

StabilityReport stability_analysis(const FeatureDump& dump,
                                   std::span<const std::uint8_t> manipulated,
                                   std::span<const double> fractions, std::size_t trials,
                                   std::uint64_t seed, const Params& params) {
  const ClassIndex idx = split_classes(dump, manipulated);
  if (trials == 0) fail(ErrorKind::kParameter, "trials must be at least 1");
  StabilityReport out;
  out.fractions.assign(fractions.begin(), fractions.end());
  out.trials = trials;
  out.seed = seed;

  for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
    const double f = fractions[fi];
    if (!(f > 0.0 && f <= 1.0)) fail(ErrorKind::kParameter, "fractions must lie in (0, 1]");
    const auto kr = static_cast<std::size_t>(std::llround(f * static_cast<double>(idx.real.size())));
    const auto ka = static_cast<std::size_t>(
        std::llround(f * static_cast<double>(idx.manipulated.size())));
    if (kr < 2 || ka < 2) {
      std::ostringstream w;
      w << "fraction " << f << " skipped: yields " << kr << " real and " << ka
        << " manipulated samples, 2 per class required";
      out.warnings.push_back(w.str());
      continue;
    }
    std::vector<LayerReport> reports(trials);
    const auto nt = static_cast<std::int64_t>(trials);
#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t t = 0; t < nt; ++t) {
      Rng rng(mix_seed(seed, fi, static_cast<std::uint64_t>(t)));
      ClassIndex sub;
      sub.real = sample_without_replacement(idx.real, kr, rng);
      sub.manipulated = sample_without_replacement(idx.manipulated, ka, rng);
      reports[static_cast<std::size_t>(t)] =
          saliency_and_select(metrics_impl(dump, sub, params, false));
    }
    auto& sel = out.selected[fi];
    auto& sk = out.selected_kl[fi];
    auto& sl = out.selected_ldr[fi];
    auto& se = out.selected_entropy[fi];
    for (const auto& r : reports) {
      sel.push_back(r.selected_layer);
      sk.push_back(argmax(r.kl));
      sl.push_back(argmax(r.ldr));
      se.push_back(argmax(r.entropy));
    }
    std::size_t count = 0;
    out.modal_layer[fi] = modal_value(sel, count);
    out.modal_agreement[fi] = static_cast<double>(count) / static_cast<double>(trials);
  }
  return out;
}

nlohmann::ordered_json to_json(const LayerReport& r) {
  nlohmann::ordered_json j;
  j["kind"] = "layer_report";
  j["num_layers"] = r.num_layers();
  j["bins"] = r.bins;
  j["epsilon"] = r.epsilon;
  j["selected_layer"] = r.selected_layer;
  j["kl"] = r.kl;
  j["ldr"] = r.ldr;
  j["entropy"] = r.entropy;
  j["z_kl"] = r.z_kl;
  j["z_ldr"] = r.z_ldr;
  j["z_entropy"] = r.z_entropy;
  j["saliency"] = r.saliency;
  return j;
}

LayerReport layer_report_from_json(const nlohmann::json& j) {
  LayerReport r;
  r.bins = j.at("bins").get<std::size_t>();
  r.epsilon = j.at("epsilon").get<double>();
  r.selected_layer = j.at("selected_layer").get<std::size_t>();
  r.kl = j.at("kl").get<std::vector<double>>();
  r.ldr = j.at("ldr").get<std::vector<double>>();
  r.entropy = j.at("entropy").get<std::vector<double>>();
  r.z_kl = j.value("z_kl", std::vector<double>{});
  r.z_ldr = j.value("z_ldr", std::vector<double>{});
  r.z_entropy = j.value("z_entropy", std::vector<double>{});
  r.saliency = j.value("saliency", std::vector<double>{});
  return r;
}

nlohmann::ordered_json to_json(const StabilityReport& r) {
  nlohmann::ordered_json j;
  j["kind"] = "stability_report";
  j["trials"] = r.trials;
  j["seed"] = r.seed;
  j["fractions"] = nlohmann::ordered_json::array();
  for (std::size_t fi = 0; fi < r.fractions.size(); ++fi) {
    nlohmann::ordered_json e;
    e["fraction"] = r.fractions[fi];
    if (auto it = r.selected.find(fi); it != r.selected.end()) {
      e["skipped"] = false;
      e["selected"] = it->second;
      e["selected_kl"] = r.selected_kl.at(fi);
      e["selected_ldr"] = r.selected_ldr.at(fi);
      e["selected_entropy"] = r.selected_entropy.at(fi);
      e["modal_layer"] = r.modal_layer.at(fi);
      e["modal_agreement"] = r.modal_agreement.at(fi);
    } else {
      e["skipped"] = true;
    }
    j["fractions"].push_back(std::move(e));
  }
  j["warnings"] = r.warnings;
  return j;
}

StabilityReport stability_report_from_json(const nlohmann::json& j) {
  StabilityReport r;
  r.trials = j.at("trials").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  const auto& fr = j.at("fractions");
  for (std::size_t fi = 0; fi < fr.size(); ++fi) {
    const auto& e = fr[fi];
    r.fractions.push_back(e.at("fraction").get<double>());
    if (e.at("skipped").get<bool>()) continue;
    r.selected[fi] = e.at("selected").get<std::vector<std::size_t>>();
    r.selected_kl[fi] = e.at("selected_kl").get<std::vector<std::size_t>>();
    r.selected_ldr[fi] = e.at("selected_ldr").get<std::vector<std::size_t>>();
    r.selected_entropy[fi] = e.at("selected_entropy").get<std::vector<std::size_t>>();
    r.modal_layer[fi] = e.at("modal_layer").get<std::size_t>();
    r.modal_agreement[fi] = e.at("modal_agreement").get<double>();
  }
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

}  // namespace manipshield::lds
