#include "manipshield/feature_store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "manipshield/error.hpp"
#include "manipshield/rng.hpp"

namespace manipshield::features {

namespace {

void check_ids(const std::vector<std::string>& ids, ErrorKind kind) {
  std::unordered_set<std::string_view> seen;
  seen.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i].empty()) fail(kind, "sample id " + std::to_string(i) + " is empty");
    if (!seen.insert(ids[i]).second) fail(kind, "duplicate sample id '" + ids[i] + "'");
  }
}

class CountingWriter {
 public:
  explicit CountingWriter(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) {
      fail(ErrorKind::kIo, "dump sink failed after " + std::to_string(written_) + " bytes");
    }
    written_ += n;
  }

  void u32(std::uint32_t v) {
    const std::array<unsigned char, 4> b = {
        static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    bytes(b.data(), b.size());
  }

  std::size_t written() const { return written_; }

 private:
  std::ostream& out_;
  std::size_t written_ = 0;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(void* data, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      fail(ErrorKind::kLength, std::string("truncated dump while reading ") + what);
    }
  }

  std::uint32_t u32(const char* what) {
    std::array<unsigned char, 4> b{};
    bytes(b.data(), b.size(), what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  // Chunked, so a corrupt length fails on truncation instead of allocating.
  std::string text(std::size_t len, const char* what) {
    std::string out;
    char chunk[4096];
    while (out.size() < len) {
      const std::size_t n = std::min(len - out.size(), sizeof chunk);
      bytes(chunk, n, what);
      out.append(chunk, n);
    }
    return out;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) fail(ErrorKind::kLength, std::string(what) + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

constexpr std::array<std::string_view, 7> kBackboneNames = {
    "SD1.4", "SD1.5", "SD3", "SDXL", "FLUX", "DiT", "proprietary"};
constexpr std::array<Backbone, 7> kBackbones = {
    Backbone::kSD14, Backbone::kSD15, Backbone::kSD3,        Backbone::kSDXL,
    Backbone::kFlux, Backbone::kDiT,  Backbone::kProprietary};
constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "add",    "remove", "replace",    "color",      "background",       "size",
    "action", "material", "expression", "scene_text", "handwritten_text", "scanning_text"};

}  // namespace

FeatureDump::FeatureDump(std::vector<std::string> sample_ids, std::size_t num_layers,
                         std::size_t dim, std::vector<float> values)
    : sample_ids_(std::move(sample_ids)),
      num_layers_(num_layers),
      dim_(dim),
      values_(std::move(values)) {
  if (values_.size() != sample_ids_.size() * num_layers_ * dim_) {
    fail(ErrorKind::kShape, "dump holds " + std::to_string(values_.size()) +
                                " values, expected N*L*D = " +
                                std::to_string(sample_ids_.size() * num_layers_ * dim_));
  }
  check_ids(sample_ids_, ErrorKind::kValidation);
}

std::optional<std::size_t> FeatureDump::find(std::string_view sample_id) const {
  for (std::size_t i = 0; i < sample_ids_.size(); ++i) {
    if (sample_ids_[i] == sample_id) return i;
  }
  return std::nullopt;
}

FeatureDump FeatureDump::subset(std::span<const std::size_t> samples) const {
  std::vector<std::string> ids;
  std::vector<float> values;
  ids.reserve(samples.size());
  values.reserve(samples.size() * num_layers_ * dim_);
  const std::size_t stride = num_layers_ * dim_;
  for (std::size_t s : samples) {
    if (s >= num_samples()) fail(ErrorKind::kIndex, "sample index out of range");
    ids.push_back(sample_ids_[s]);
    values.insert(values.end(), values_.begin() + static_cast<std::ptrdiff_t>(s * stride),
                  values_.begin() + static_cast<std::ptrdiff_t>((s + 1) * stride));
  }
  return FeatureDump(std::move(ids), num_layers_, dim_, std::move(values));
}

FeatureDump FeatureDump::layer(std::size_t layer) const {
  if (layer >= num_layers_) fail(ErrorKind::kIndex, "layer index out of range");
  std::vector<float> values;
  values.reserve(num_samples() * dim_);
  for (std::size_t s = 0; s < num_samples(); ++s) {
    auto r = row(s, layer);
    values.insert(values.end(), r.begin(), r.end());
  }
  return FeatureDump(sample_ids_, 1, dim_, std::move(values));
}

bool operator==(const FeatureDump& a, const FeatureDump& b) {
  return a.sample_ids_ == b.sample_ids_ && a.num_layers_ == b.num_layers_ &&
         a.dim_ == b.dim_ && a.values_.size() == b.values_.size() &&
         std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
}

std::size_t encode_dump(const FeatureDump& dump, std::ostream& sink) {
  CountingWriter w(sink);
  w.bytes(kDumpMagic, sizeof kDumpMagic);
  w.u32(kDumpVersion);
  w.u32(checked_u32(dump.num_samples(), "sample count"));
  w.u32(checked_u32(dump.num_layers(), "layer count"));
  w.u32(checked_u32(dump.dim(), "dimension"));
  for (const auto& id : dump.sample_ids()) {
    w.u32(checked_u32(id.size(), "sample id length"));
    w.bytes(id.data(), id.size());
  }
  // Values go out one float at a time in little-endian order; the loop is
  // byte-order agnostic.
  std::vector<unsigned char> buf;
  buf.reserve(dump.dim() * 4);
  for (std::size_t s = 0; s < dump.num_samples(); ++s) {
    for (std::size_t l = 0; l < dump.num_layers(); ++l) {
      buf.clear();
      for (float v : dump.row(s, l)) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        buf.push_back(static_cast<unsigned char>(bits));
        buf.push_back(static_cast<unsigned char>(bits >> 8));
        buf.push_back(static_cast<unsigned char>(bits >> 16));
        buf.push_back(static_cast<unsigned char>(bits >> 24));
      }
      w.bytes(buf.data(), buf.size());
    }
  }
  sink.flush();
  if (!sink) fail(ErrorKind::kIo, "dump sink failed on flush after " + std::to_string(w.written()) + " bytes");
  return w.written();
}

FeatureDump decode_dump(std::istream& source) {
  Reader r(source);
  char magic[4];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kDumpMagic, sizeof magic) != 0) {
    fail(ErrorKind::kFormat, "bad dump magic '" + std::string(magic, 4) + "'");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kDumpVersion) {
    fail(ErrorKind::kFormat, "unsupported dump version " + std::to_string(version));
  }
  const std::size_t n = r.u32("sample count");
  const std::size_t layers = r.u32("layer count");
  const std::size_t dim = r.u32("dimension");

  std::vector<std::string> ids;
  ids.reserve(std::min<std::size_t>(n, 1 << 20));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = r.u32("sample id length");
    ids.push_back(r.text(len, "sample id"));
  }
  check_ids(ids, ErrorKind::kFormat);

  const std::size_t count = n * layers * dim;
  std::vector<float> values;
  values.reserve(std::min<std::size_t>(count, std::size_t{1} << 24));
  std::vector<unsigned char> buf(dim * 4);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t l = 0; l < layers; ++l) {
      r.bytes(buf.data(), buf.size(), "payload");
      for (std::size_t d = 0; d < dim; ++d) {
        const unsigned char* b = buf.data() + 4 * d;
        const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                                   (static_cast<std::uint32_t>(b[1]) << 8) |
                                   (static_cast<std::uint32_t>(b[2]) << 16) |
                                   (static_cast<std::uint32_t>(b[3]) << 24);
        const float v = std::bit_cast<float>(bits);
        if (!std::isfinite(v)) {
          fail(ErrorKind::kData, "non-finite value at sample " + std::to_string(s) +
                                     " layer " + std::to_string(l) + " dim " + std::to_string(d));
        }
        values.push_back(v);
      }
    }
  }
  if (!r.at_end()) fail(ErrorKind::kLength, "trailing bytes after dump payload");
  return FeatureDump(std::move(ids), layers, dim, std::move(values));
}

std::size_t write_dump_file(const FeatureDump& dump, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open '" + path + "' for writing");
  return encode_dump(dump, out);
}

FeatureDump read_dump_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path + "'");
  return decode_dump(in);
}

std::string_view to_string(Backbone b) { return kBackboneNames[static_cast<std::size_t>(b)]; }
std::string_view to_string(Category c) { return kCategoryNames[static_cast<std::size_t>(c)]; }

Backbone parse_backbone(std::string_view text) {
  for (std::size_t i = 0; i < kBackboneNames.size(); ++i) {
    if (kBackboneNames[i] == text) return kBackbones[i];
  }
  fail(ErrorKind::kValidation, "unknown backbone '" + std::string(text) + "'");
}

Category parse_category(std::string_view text) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == text) return static_cast<Category>(i);
  }
  fail(ErrorKind::kValidation, "unknown category '" + std::string(text) + "'");
}

std::span<const Backbone> all_backbones() { return kBackbones; }

void DatasetManifest::validate() const {
  std::map<std::string_view, const SampleLabel*> by_id;
  for (const auto& label : labels) {
    if (label.sample_id.empty()) fail(ErrorKind::kValidation, "empty sample id in manifest");
    if (!by_id.emplace(label.sample_id, &label).second) {
      fail(ErrorKind::kValidation, "duplicate sample id '" + label.sample_id + "'");
    }
    if (label.category.has_value() != label.is_manipulated) {
      fail(ErrorKind::kValidation,
           "sample '" + label.sample_id + "': category must be present iff manipulated");
    }
  }
  std::map<std::string_view, std::vector<const SampleLabel*>> pairs;
  for (const auto& label : labels) {
    if (label.pair_id) pairs[*label.pair_id].push_back(&label);
  }
  for (const auto& [pair, members] : pairs) {
    const bool ok = members.size() == 2 &&
                    members[0]->is_manipulated != members[1]->is_manipulated;
    if (!ok) {
      fail(ErrorKind::kValidation,
           "pair '" + std::string(pair) + "' must link exactly one real and one manipulated sample");
    }
  }
  // Splits sharing a prefix ("FLUX/train", "FLUX/val", ...) form one family
  // and must be disjoint within it.
  std::map<std::string, std::set<std::string_view>> families;
  for (const auto& [name, ids] : splits) {
    const auto slash = name.rfind('/');
    const std::string family = slash == std::string::npos ? "" : name.substr(0, slash);
    auto& used = families[family];
    for (const auto& id : ids) {
      if (!by_id.contains(id)) {
        fail(ErrorKind::kValidation, "split '" + name + "' names unlabeled sample '" + id + "'");
      }
      if (!used.insert(id).second) {
        fail(ErrorKind::kValidation, "sample '" + id + "' appears in more than one split");
      }
    }
  }
}

const SampleLabel* DatasetManifest::find(std::string_view sample_id) const {
  for (const auto& label : labels) {
    if (label.sample_id == sample_id) return &label;
  }
  return nullptr;
}

DatasetManifest parse_manifest(std::istream& in) {
  DatasetManifest m;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::kFormat, "manifest is empty; header row required");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    fail(ErrorKind::kFormat, "manifest header must be '" + std::string(kManifestHeader) + "'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 6) {
      fail(ErrorKind::kFormat, "manifest line " + std::to_string(line_no) + ": expected 6 fields");
    }
    SampleLabel label;
    label.sample_id = f[0];
    if (f[1] == "1" || f[1] == "true") {
      label.is_manipulated = true;
    } else if (f[1] != "0" && f[1] != "false") {
      fail(ErrorKind::kFormat, "manifest line " + std::to_string(line_no) + ": bad is_manipulated");
    }
    if (!f[2].empty()) label.category = parse_category(f[2]);
    label.editor = f[3];
    label.backbone = parse_backbone(f[4]);
    if (!f[5].empty()) label.pair_id = f[5];
    m.labels.push_back(std::move(label));
  }
  m.validate();
  return m;
}

void write_manifest(const DatasetManifest& manifest, std::ostream& out) {
  out << kManifestHeader << '\n';
  for (const auto& l : manifest.labels) {
    out << l.sample_id << ',' << (l.is_manipulated ? 1 : 0) << ','
        << (l.category ? to_string(*l.category) : "") << ',' << l.editor << ','
        << to_string(l.backbone) << ',' << l.pair_id.value_or("") << '\n';
  }
}

DatasetManifest read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open manifest '" + path + "'");
  return parse_manifest(in);
}

void write_manifest_file(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open '" + path + "' for writing");
  write_manifest(manifest, out);
  if (!out) fail(ErrorKind::kIo, "failed writing manifest '" + path + "'");
}

namespace {

struct Partition {
  std::vector<std::string> train, val, test;
};

// 4:1:1 on one stratum: val and test get round(n/6) each, train the rest.
void split_stratum(std::vector<std::string> ids, Rng& rng, Partition& out) {
  std::sort(ids.begin(), ids.end());
  shuffle(std::span(ids), rng);
  const std::size_t n = ids.size();
  const std::size_t held = (n + 3) / 6;
  const std::size_t train = n - 2 * held;
  out.train.insert(out.train.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(train));
  out.val.insert(out.val.end(), ids.begin() + static_cast<std::ptrdiff_t>(train),
                 ids.begin() + static_cast<std::ptrdiff_t>(train + held));
  out.test.insert(out.test.end(), ids.begin() + static_cast<std::ptrdiff_t>(train + held), ids.end());
}

constexpr std::size_t kMinStratum = 6;

}  // namespace

DatasetManifest build_splits(const DatasetManifest& manifest, std::uint64_t seed) {
  if (manifest.labels.empty()) fail(ErrorKind::kInsufficientData, "manifest has no labels");
  manifest.validate();

  std::array<std::vector<std::string>, 2> strata;
  for (const auto& l : manifest.labels) strata[l.is_manipulated ? 1 : 0].push_back(l.sample_id);
  for (std::size_t c = 0; c < 2; ++c) {
    if (strata[c].size() < kMinStratum) {
      fail(ErrorKind::kInsufficientData,
           std::string(c ? "manipulated" : "real") + " stratum has " +
               std::to_string(strata[c].size()) + " samples; at least 6 are needed for 4:1:1");
    }
  }

  DatasetManifest out;
  out.labels = manifest.labels;
  Rng rng(seed);
  Partition all;
  for (auto& s : strata) split_stratum(s, rng, all);
  out.splits["train"] = std::move(all.train);
  out.splits["val"] = std::move(all.val);
  out.splits["test"] = std::move(all.test);

  // Per-backbone families reuse the stratified rule; a stratum too small to
  // split goes entirely to train so every backbone id still lands somewhere.
  for (Backbone b : kBackbones) {
    std::array<std::vector<std::string>, 2> bs;
    for (const auto& l : manifest.labels) {
      if (l.backbone == b) bs[l.is_manipulated ? 1 : 0].push_back(l.sample_id);
    }
    if (bs[0].empty() && bs[1].empty()) continue;
    Rng brng(seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(b) + 1)));
    Partition p;
    for (auto& s : bs) {
      if (s.size() >= kMinStratum) {
        split_stratum(s, brng, p);
      } else {
        std::sort(s.begin(), s.end());
        p.train.insert(p.train.end(), s.begin(), s.end());
      }
    }
    const std::string prefix(to_string(b));
    out.splits[prefix + "/train"] = std::move(p.train);
    out.splits[prefix + "/val"] = std::move(p.val);
    out.splits[prefix + "/test"] = std::move(p.test);
  }
  return out;
}

std::vector<SampleLabel> align_labels(const FeatureDump& dump, const DatasetManifest& manifest) {
  std::map<std::string_view, const SampleLabel*> by_id;
  for (const auto& l : manifest.labels) by_id.emplace(l.sample_id, &l);
  std::vector<SampleLabel> out;
  out.reserve(dump.num_samples());
  for (const auto& id : dump.sample_ids()) {
    auto it = by_id.find(id);
    if (it == by_id.end()) fail(ErrorKind::kNotFound, "no manifest label for sample '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace manipshield::features
