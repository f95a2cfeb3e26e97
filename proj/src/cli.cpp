#include "manipshield/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "manipshield/annotation.hpp"
#include "manipshield/annotation_server.hpp"
#include "manipshield/corpus_stats.hpp"
#include "manipshield/decoders.hpp"
#include "manipshield/error.hpp"
#include "manipshield/feature_store.hpp"
#include "manipshield/lds_probe.hpp"
#include "manipshield/losses.hpp"
#include "manipshield/metrics_eval.hpp"
#include "manipshield/report_prompt.hpp"
#include "manipshield/taxonomy.hpp"

namespace manipshield::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open '" + path + "' for writing");
  out << text;
  out.flush();
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path + "'");
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kFormat, "'" + path + "' is not valid JSON: " + e.what());
  }
}

std::vector<json> read_jsonl(const std::string& path) {
  std::istringstream in(read_text(path));
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error&) {
      fail(ErrorKind::kFormat, path + ":" + std::to_string(n) + ": invalid JSON line");
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

// Rows of a headed CSV keyed by column name.
std::vector<std::map<std::string, std::string>> read_csv(const std::string& path,
                                                         std::initializer_list<const char*> required) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::kFormat, "'" + path + "' is empty");
  const auto header = split(line);
  for (const char* col : required) {
    if (std::find(header.begin(), header.end(), col) == header.end()) {
      fail(ErrorKind::kFormat, "'" + path + "' lacks column '" + col + "'");
    }
  }
  std::vector<std::map<std::string, std::string>> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    if (f.size() != header.size()) {
      fail(ErrorKind::kFormat, path + ":" + std::to_string(n) + ": expected " +
                                   std::to_string(header.size()) + " fields");
    }
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < f.size(); ++i) row[header[i]] = f[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::kFormat, what + ": not a number: '" + s + "'");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Writes to the path, or to stdout when the path is empty.
void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_text(path, text);
  }
}

void need(const std::string& value, const char* flag) {
  if (value.empty()) fail(ErrorKind::kValidation, std::string("missing required option ") + flag);
}

struct Common {
  std::string config;
  std::uint64_t seed = 0;
};

struct LdsArgs {
  std::string features, manifest, out;
  std::size_t bins = lds::kDefaultBins;
  double epsilon = lds::kDefaultEpsilon;
  std::vector<double> fractions = {0.001, 0.005, 0.01, 0.05};
  std::size_t trials = 20;
};

struct LossArgs {
  losses::LossConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--tau", cfg.tau, "contrastive temperature");
    app->add_option("--alpha", cfg.alpha, "focal alpha");
    app->add_option("--gamma", cfg.gamma, "focal gamma");
    app->add_option("--lambda-binary", cfg.lambda_binary);
    app->add_option("--lambda-bbox", cfg.lambda_bbox);
    app->add_option("--lambda-cue", cfg.lambda_cue);
  }
};

struct TrainArgs {
  std::string features, manifest, annotations, lds_report, out, curve;
  long layer = -1;
  decoders::TrainConfig cfg;
  std::vector<std::size_t> hidden = {256, 64};
  std::size_t max_boxes = 8;
  LossArgs loss;
};

struct EvalArgs {
  std::string pred, gt, out, grid, markdown;
  double threshold = metrics::kDefaultThreshold;
};

struct StatsArgs {
  std::string images, groups, out, summary;
};

struct PromptArgs {
  std::string checkpoint, features, manifest, sample, out, json_out;
  long layer = -1;
  double threshold = 0.5;
};

struct ServeArgs {
  std::string log, host = "127.0.0.1", images, ui;
  int port = 8080;
  std::size_t threads = 8;
};

std::size_t resolve_layer(long layer, const std::string& lds_report, std::size_t num_layers) {
  std::size_t l = 0;
  if (layer >= 0) {
    l = static_cast<std::size_t>(layer);
  } else if (!lds_report.empty()) {
    l = lds::layer_report_from_json(read_json(lds_report)).selected_layer;
  } else {
    fail(ErrorKind::kValidation, "give --layer or --lds-report");
  }
  if (l >= num_layers) {
    fail(ErrorKind::kIndex, "layer " + std::to_string(l) + " out of range for " +
                                std::to_string(num_layers) + " layers");
  }
  return l;
}

// --- lds ---------------------------------------------------------------------

void lds_select(const LdsArgs& a, std::ostream& out) {
  need(a.features, "--features");
  need(a.manifest, "--manifest");
  const auto dump = features::read_dump_file(a.features);
  const auto labels = features::align_labels(dump, features::read_manifest_file(a.manifest));
  auto report = lds::saliency_and_select(lds::layer_metrics(dump, labels, {a.bins, a.epsilon}));
  emit(a.out, lds::to_json(report).dump(2) + "\n", out);
  if (!a.out.empty()) out << "selected layer: " << report.selected_layer << "\n";
}

void lds_stability(const LdsArgs& a, std::uint64_t seed, std::ostream& out) {
  need(a.features, "--features");
  need(a.manifest, "--manifest");
  const auto dump = features::read_dump_file(a.features);
  const auto labels = features::align_labels(dump, features::read_manifest_file(a.manifest));
  const auto flags = lds::class_flags(labels);
  const auto report =
      lds::stability_analysis(dump, flags, a.fractions, a.trials, seed, {a.bins, a.epsilon});
  emit(a.out, lds::to_json(report).dump(2) + "\n", out);
  if (!a.out.empty()) {
    for (const auto& [fi, layer] : report.modal_layer) {
      out << "fraction " << a.fractions[fi] << ": layer " << layer << " (agreement "
          << report.modal_agreement.at(fi) << ")\n";
    }
  }
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
}

// --- training ----------------------------------------------------------------

// Ground-truth boxes and the leading cue per image from an annotation export.
struct GroundTruth {
  std::vector<Box> boxes;
  int cue = -1;
};

std::map<std::string, GroundTruth> read_annotation_export(const std::string& path) {
  std::map<std::string, GroundTruth> out;
  for (const auto& line : read_jsonl(path)) {
    const auto id = line.at("image_id").get<std::string>();
    GroundTruth gt;
    std::size_t best = kNumCues;
    for (const auto& b : annotation::boxes_from_json(line.at("boxes"))) {
      gt.boxes.push_back(b.box);
      for (const auto& c : b.cues) best = std::min(best, cue_index(c).value_or(kNumCues));
    }
    if (best < kNumCues) gt.cue = static_cast<int>(best);
    out[id] = std::move(gt);
  }
  return out;
}

void train_cmd(TrainArgs a, std::uint64_t seed, std::ostream& out) {
  need(a.features, "--features");
  need(a.manifest, "--manifest");
  need(a.out, "--out");
  const auto dump = features::read_dump_file(a.features);
  const auto labels = features::align_labels(dump, features::read_manifest_file(a.manifest));
  const std::size_t layer = resolve_layer(a.layer, a.lds_report, dump.num_layers());

  std::map<std::string, GroundTruth> gt;
  if (!a.annotations.empty()) gt = read_annotation_export(a.annotations);
  decoders::Targets targets;
  for (const auto& l : labels) {
    targets.manipulated.push_back(l.is_manipulated ? 1 : 0);
    auto it = gt.find(l.sample_id);
    targets.cue.push_back(it == gt.end() ? -1 : it->second.cue);
    targets.boxes.push_back(it == gt.end() ? std::vector<Box>{} : it->second.boxes);
  }
  std::size_t positives = 0;
  for (auto m : targets.manipulated) positives += m;
  if (positives < 2 || targets.size() - positives < 2) {
    fail(ErrorKind::kInsufficientData, "training needs at least 2 samples per class");
  }

  a.cfg.seed = seed;
  decoders::HeadsConfig hc;
  hc.input_dim = dump.dim();
  hc.hidden = a.hidden;
  hc.max_boxes = a.max_boxes;
  hc.num_cues = a.loss.cfg.num_cues;
  const auto features = decoders::layer_matrix(dump, layer);
  const auto result = decoders::train(features, targets, a.cfg, a.loss.cfg, hc);

  std::ostringstream ck;
  decoders::save_heads(result.heads, ck);
  write_text(a.out, ck.str());
  if (!a.curve.empty()) {
    std::ostringstream curve;
    decoders::write_loss_curve(result.curve, curve);
    write_text(a.curve, curve.str());
  }

  std::vector<double> scores;
  for (const auto& p : decoders::forward_heads(features, result.heads)) scores.push_back(p.p_manipulated);
  const auto m = metrics::binary_metrics(scores, targets.manipulated);
  out << "layer: " << layer << "\n";
  out << "steps: " << result.curve.size() << "\n";
  if (!result.curve.empty()) out << "final loss: " << num(result.curve.back().total) << "\n";
  out << "train accuracy: " << num(m.accuracy) << "\n";
}

void pretrain_cmd(const TrainArgs& a, std::uint64_t seed, std::ostream& out) {
  need(a.features, "--features");
  need(a.manifest, "--manifest");
  need(a.out, "--out");
  const auto dump = features::read_dump_file(a.features);
  const auto labels = features::align_labels(dump, features::read_manifest_file(a.manifest));
  const std::size_t layer = resolve_layer(a.layer, a.lds_report, dump.num_layers());
  const auto pairs = decoders::collect_pairs(labels);
  if (pairs.empty()) fail(ErrorKind::kData, "no real/manipulated pairs linked by pair_id");

  auto cfg = a.cfg;
  cfg.seed = seed;
  const auto features = decoders::layer_matrix(dump, layer);
  const auto identity = decoders::Matrix::Identity(static_cast<Eigen::Index>(dump.dim()),
                                                   static_cast<Eigen::Index>(dump.dim()));
  auto projector = decoders::adapted_projector(identity, cfg.lora_rank, cfg.lora_alpha, seed);
  const auto before = decoders::pair_similarity(projector, features, pairs);
  const auto result = decoders::contrastive_pretrain(std::move(projector), features, pairs, cfg, a.loss.cfg.tau);
  const auto after = decoders::pair_similarity(result.projector, features, pairs);

  std::ostringstream ck;
  decoders::save_projector(result.projector, ck);
  write_text(a.out, ck.str());
  if (!a.curve.empty()) {
    std::string csv = "step,loss\n";
    for (std::size_t i = 0; i < result.curve.size(); ++i) csv += std::to_string(i) + "," + num(result.curve[i]) + "\n";
    write_text(a.curve, csv);
  }
  out << "pairs: " << pairs.size() << "\n";
  out << "similarity gap before: " << num(before.positive - before.negative) << "\n";
  out << "similarity gap after: " << num(after.positive - after.negative) << "\n";
}

// --- eval --------------------------------------------------------------------

void eval_detect(const EvalArgs& a, std::ostream& out) {
  need(a.pred, "--pred");
  need(a.gt, "--gt");
  const auto rows = read_csv(a.pred, {"sample_id", "score"});
  const auto manifest = features::read_manifest_file(a.gt);
  if (rows.size() != manifest.labels.size()) {
    fail(ErrorKind::kShape, std::to_string(rows.size()) + " predictions for " +
                                std::to_string(manifest.labels.size()) + " labels");
  }
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::map<std::string, std::pair<std::vector<double>, std::vector<std::uint8_t>>> by_backbone;
  for (const auto& row : rows) {
    const auto& id = row.at("sample_id");
    const auto* label = manifest.find(id);
    if (!label) fail(ErrorKind::kNotFound, "prediction for unknown sample '" + id + "'");
    const double s = parse_double(row.at("score"), "score of " + id);
    scores.push_back(s);
    labels.push_back(label->is_manipulated ? 1 : 0);
    auto& sub = by_backbone[std::string(features::to_string(label->backbone))];
    sub.first.push_back(s);
    sub.second.push_back(labels.back());
  }
  const auto m = metrics::binary_metrics(scores, labels, a.threshold);
  metrics::EvalResult r;
  r.overall.accuracy = m.accuracy;
  r.overall.f1 = m.f1;
  r.counts = m.counts;
  for (const auto& [name, sub] : by_backbone) {
    const auto sm = metrics::binary_metrics(sub.first, sub.second, a.threshold);
    r.per_subset[name].accuracy = sm.accuracy;
    r.per_subset[name].f1 = sm.f1;
  }
  emit(a.out, metrics::to_json(r).dump(2) + "\n", out);
}

void eval_localize(const EvalArgs& a, std::ostream& out) {
  need(a.pred, "--pred");
  need(a.gt, "--gt");
  const auto pred_lines = read_jsonl(a.pred);
  const auto gt_lines = read_jsonl(a.gt);
  if (pred_lines.size() != gt_lines.size()) {
    fail(ErrorKind::kShape, std::to_string(pred_lines.size()) + " predictions for " +
                                std::to_string(gt_lines.size()) + " ground-truth images");
  }
  std::map<std::string, std::vector<decoders::ScoredBox>> preds;
  for (const auto& line : pred_lines) {
    std::vector<decoders::ScoredBox> boxes;
    for (const auto& b : line.at("boxes")) {
      const auto& c = b.at("box");
      boxes.push_back({Box{c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(),
                           c.at(3).get<double>()},
                       b.at("confidence").get<double>()});
    }
    preds[line.at("image_id").get<std::string>()] = std::move(boxes);
  }
  double sum = 0.0;
  for (const auto& line : gt_lines) {
    const auto id = line.at("image_id").get<std::string>();
    auto it = preds.find(id);
    if (it == preds.end()) fail(ErrorKind::kShape, "no prediction for image '" + id + "'");
    std::vector<Box> gt;
    for (const auto& b : annotation::boxes_from_json(line.at("boxes"))) gt.push_back(b.box);
    sum += metrics::localization_score(it->second, gt, a.threshold);
  }
  metrics::EvalResult r;
  if (!gt_lines.empty()) r.overall.mean_iou = sum / static_cast<double>(gt_lines.size());
  emit(a.out, metrics::to_json(r).dump(2) + "\n", out);
}

void eval_explain(const EvalArgs& a, std::ostream& out) {
  need(a.pred, "--pred");
  need(a.gt, "--gt");
  auto load = [](const std::string& path) {
    std::map<std::string, std::vector<double>> m;
    for (const auto& line : read_jsonl(path)) {
      m[line.at("sample_id").get<std::string>()] = line.at("embedding").get<std::vector<double>>();
    }
    return m;
  };
  const auto pred = load(a.pred);
  const auto gt = load(a.gt);
  if (pred.size() != gt.size()) {
    fail(ErrorKind::kShape, std::to_string(pred.size()) + " predicted embeddings for " +
                                std::to_string(gt.size()) + " references");
  }
  double sum = 0.0;
  for (const auto& [id, e] : gt) {
    auto it = pred.find(id);
    if (it == pred.end()) fail(ErrorKind::kShape, "no predicted embedding for '" + id + "'");
    sum += metrics::css(it->second, e);
  }
  metrics::EvalResult r;
  if (!gt.empty()) r.overall.mean_css = sum / static_cast<double>(gt.size());
  emit(a.out, metrics::to_json(r).dump(2) + "\n", out);
}

void eval_matrix(const EvalArgs& a, std::ostream& out) {
  need(a.grid, "--grid");
  const fs::path base = fs::path(a.grid).parent_path();
  metrics::RunGrid runs;
  for (const auto& row : read_csv(a.grid, {"train", "test", "result"})) {
    fs::path p = row.at("result");
    if (p.is_relative()) p = base / p;
    runs[{row.at("train"), row.at("test")}] = metrics::eval_result_from_json(read_json(p.string()));
  }
  if (runs.empty()) fail(ErrorKind::kShape, "grid has no cells");
  const auto m = metrics::generalization_matrix(runs);
  emit(a.out, metrics::to_json(m).dump(2) + "\n", out);
  if (!a.markdown.empty()) write_text(a.markdown, metrics::render_markdown(m));
}

// --- stats -------------------------------------------------------------------

void stats_corpus(const StatsArgs& a, std::ostream& out) {
  need(a.images, "--images");
  need(a.groups, "--groups");
  need(a.out, "--out");
  const auto rows = read_csv(a.groups, {"path", "group"});
  std::vector<corpus::RgbImage> images;
  for (const auto& row : rows) images.push_back(corpus::read_image((fs::path(a.images) / row.at("path")).string()));
  const auto stats = corpus::batch_stats(images);

  std::string csv = "path,group,brightness,contrast,colorfulness,si\n";
  std::map<std::string, std::vector<corpus::ImageStats>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = stats[i];
    csv += rows[i].at("path") + "," + rows[i].at("group") + "," + num(s.brightness) + "," +
           num(s.contrast) + "," + num(s.colorfulness) + "," + num(s.si) + "\n";
    groups[rows[i].at("group")].push_back(s);
  }
  write_text(a.out, csv);
  const auto summary = corpus::corpus_summary(groups);
  write_text(a.summary.empty() ? a.out + ".summary.json" : a.summary, corpus::to_json(summary).dump(2) + "\n");
  out << "images: " << rows.size() << "\n";
  for (const auto& w : summary.warnings) out << "warning: " << w << "\n";
}

// --- prompt ------------------------------------------------------------------

void prompt_build(const PromptArgs& a, std::ostream& out) {
  need(a.checkpoint, "--checkpoint");
  need(a.features, "--features");
  need(a.sample, "--sample");
  std::istringstream ck(read_text(a.checkpoint));
  const auto heads = decoders::load_heads(ck);
  const auto dump = features::read_dump_file(a.features);
  const std::size_t layer = resolve_layer(a.layer, {}, dump.num_layers());
  const auto index = dump.find(a.sample);
  if (!index) fail(ErrorKind::kNotFound, "sample '" + a.sample + "' not in dump");

  const auto row = dump.row(*index, layer);
  decoders::Vector x(static_cast<Eigen::Index>(row.size()));
  for (std::size_t d = 0; d < row.size(); ++d) x[static_cast<Eigen::Index>(d)] = row[d];
  std::optional<features::Category> hint;
  if (!a.manifest.empty()) {
    const auto manifest = features::read_manifest_file(a.manifest);
    if (const auto* label = manifest.find(a.sample)) hint = label->category;
  }
  const std::vector<std::string> names(kCueNames.begin(), kCueNames.end());
  const auto prompt =
      report::build_structured_prompt(decoders::forward_heads(x, heads), names, a.threshold, hint);
  emit(a.out, prompt.text, out);
  if (!a.json_out.empty()) write_text(a.json_out, report::to_json(prompt).dump(2) + "\n");
}

// --- serve -------------------------------------------------------------------

void serve(const ServeArgs& a, std::ostream& out) {
  annotation::AnnotationStore store(a.log);
  annotation::AnnotationServer server(store, {a.images, a.ui, a.threads});
  if (!server.bind(a.host, a.port)) {
    fail(ErrorKind::kIo, "cannot bind " + a.host + ":" + std::to_string(a.port));
  }
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::thread worker([&] { server.listen(); });
  out << "listening on http://" << a.host << ":" << a.port << "\n" << std::flush;
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  worker.join();
}

// --- config ------------------------------------------------------------------

std::string config_value(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + config_value(v[i]);
    return s;
  }
  return v.dump();
}

// Fills options of the chosen subcommand that were not given on the command
// line from a flat JSON object keyed by long option name. Keys that the
// subcommand does not know are ignored so one file can serve every command.
void apply_config(CLI::App* leaf, const json& config) {
  if (!config.is_object()) fail(ErrorKind::kConfig, "config must be a JSON object");
  for (const auto& [key, value] : config.items()) {
    CLI::Option* opt = leaf->get_option_no_throw("--" + key);
    if (!opt || opt->count() > 0) continue;
    opt->add_result(config_value(value));
    opt->run_callback();
  }
}

CLI::App* leaf_of(CLI::App& app) {
  CLI::App* cur = &app;
  while (!cur->get_subcommands().empty()) cur = cur->get_subcommands().front();
  return cur;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Manipulation forensics workbench", "manipshield"};
  app.require_subcommand(1);

  Common common;
  app.add_option("--config", common.config, "JSON file of option defaults");

  LdsArgs lds_args;
  TrainArgs train_args;
  EvalArgs eval_args;
  StatsArgs stats_args;
  PromptArgs prompt_args;
  ServeArgs serve_args;
  std::string dump_path;

  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", common.seed, "random seed"); };

  auto* lds = app.add_subcommand("lds", "layer discrimination selection")->require_subcommand(1);
  for (const char* name : {"select", "stability"}) {
    auto* sub = lds->add_subcommand(name, std::string(name) == "select" ? "rank layers and pick one"
                                                                        : "selection under subsampling");
    sub->add_option("--features", lds_args.features, "feature dump (.msfd)");
    sub->add_option("--manifest", lds_args.manifest, "label manifest (CSV)");
    sub->add_option("--bins", lds_args.bins, "entropy histogram bins");
    sub->add_option("--epsilon", lds_args.epsilon, "LDR denominator guard");
    sub->add_option("--out", lds_args.out, "report path (JSON); stdout when omitted");
    if (std::string(name) == "stability") {
      sub->add_option("--fractions", lds_args.fractions, "subsample fractions")->delimiter(',');
      sub->add_option("--trials", lds_args.trials, "subsamples per fraction");
      add_seed(sub);
    }
  }

  auto add_train_opts = [&](CLI::App* sub) {
    sub->add_option("--features", train_args.features, "feature dump (.msfd)");
    sub->add_option("--manifest", train_args.manifest, "label manifest (CSV)");
    sub->add_option("--layer", train_args.layer, "layer to train on");
    sub->add_option("--lds-report", train_args.lds_report, "take the layer from an LDS report");
    sub->add_option("--out", train_args.out, "checkpoint path (.mshd)");
    sub->add_option("--curve", train_args.curve, "loss curve path (CSV)");
    sub->add_option("--epochs", train_args.cfg.epochs);
    sub->add_option("--lr", train_args.cfg.learning_rate, "learning rate");
    sub->add_option("--batch-size", train_args.cfg.batch_size);
    sub->add_option("--warmup-ratio", train_args.cfg.warmup_ratio);
    sub->add_option("--weight-decay", train_args.cfg.weight_decay);
    train_args.loss.add(sub);
    add_seed(sub);
  };
  auto* train = app.add_subcommand("train", "train the decoder heads");
  add_train_opts(train);
  train->add_option("--annotations", train_args.annotations, "annotation export (JSONL) for boxes and cues");
  train->add_option("--hidden", train_args.hidden, "hidden layer widths")->delimiter(',');
  train->add_option("--max-boxes", train_args.max_boxes);
  auto* pretrain = app.add_subcommand("pretrain-contrastive", "contrastive projector pretraining");
  add_train_opts(pretrain);
  pretrain->add_option("--rank", train_args.cfg.lora_rank, "LoRA rank");
  pretrain->add_option("--lora-alpha", train_args.cfg.lora_alpha, "LoRA alpha");

  auto* eval = app.add_subcommand("eval", "score predictions")->require_subcommand(1);
  for (const char* name : {"detect", "localize", "explain"}) {
    auto* sub = eval->add_subcommand(name);
    sub->add_option("--pred", eval_args.pred, "predictions");
    sub->add_option("--gt", eval_args.gt, "ground truth");
    sub->add_option("--out", eval_args.out, "result path (JSON); stdout when omitted");
    if (std::string(name) != "explain") sub->add_option("--threshold", eval_args.threshold);
  }
  auto* matrix = eval->add_subcommand("matrix", "cross-subset generalization matrix");
  matrix->add_option("--grid", eval_args.grid, "CSV of train,test,result");
  matrix->add_option("--out", eval_args.out, "matrix path (JSON); stdout when omitted");
  matrix->add_option("--markdown", eval_args.markdown, "also render a Markdown table");

  auto* stats = app.add_subcommand("stats", "image statistics")->require_subcommand(1);
  auto* corpus_cmd = stats->add_subcommand("corpus", "per-image and per-group statistics");
  corpus_cmd->add_option("--images", stats_args.images, "image directory");
  corpus_cmd->add_option("--groups", stats_args.groups, "CSV of path,group");
  corpus_cmd->add_option("--out", stats_args.out, "per-image rows (CSV)");
  corpus_cmd->add_option("--summary", stats_args.summary, "summary path (JSON)");

  auto* prompt = app.add_subcommand("prompt", "structured prompts")->require_subcommand(1);
  auto* build = prompt->add_subcommand("build", "prompt for one sample");
  build->add_option("--checkpoint", prompt_args.checkpoint, "trained heads (.mshd)");
  build->add_option("--features", prompt_args.features, "feature dump (.msfd)");
  build->add_option("--layer", prompt_args.layer);
  build->add_option("--sample", prompt_args.sample, "sample id");
  build->add_option("--manifest", prompt_args.manifest, "manifest for the category hint");
  build->add_option("--threshold", prompt_args.threshold);
  build->add_option("--out", prompt_args.out, "prompt text path; stdout when omitted");
  build->add_option("--json", prompt_args.json_out, "structured prompt path (JSON)");

  auto* serve_cmd = app.add_subcommand("serve", "run the annotation service");
  serve_cmd->add_option("--log", serve_args.log, "event log path; in-memory when omitted");
  serve_cmd->add_option("--host", serve_args.host);
  serve_cmd->add_option("--port", serve_args.port);
  serve_cmd->add_option("--images", serve_args.images, "directory served under /files");
  serve_cmd->add_option("--ui", serve_args.ui, "directory served under /");
  serve_cmd->add_option("--threads", serve_args.threads);

  auto* dump = app.add_subcommand("dump", "feature dumps")->require_subcommand(1);
  auto* info = dump->add_subcommand("info", "print dump shape");
  info->add_option("--features", dump_path, "feature dump (.msfd)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << leaf_of(app)->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << leaf_of(app)->help();
    return 1;
  }

  try {
    CLI::App* leaf = leaf_of(app);
    json config = json::object();
    if (!common.config.empty()) {
      config = read_json(common.config);
      apply_config(leaf, config);
    }
    if (CLI::Option* s = leaf->get_option_no_throw("--seed"); s && s->count() == 0) {
      if (const char* env = std::getenv("MANIPSHIELD_SEED")) {
        s->add_result(env);
        s->run_callback();
      }
    }

    if (leaf->get_name() == "select") {
      lds_select(lds_args, out);
    } else if (leaf->get_name() == "stability") {
      lds_stability(lds_args, common.seed, out);
    } else if (leaf == train) {
      train_cmd(train_args, common.seed, out);
    } else if (leaf == pretrain) {
      pretrain_cmd(train_args, common.seed, out);
    } else if (leaf->get_name() == "detect") {
      eval_detect(eval_args, out);
    } else if (leaf->get_name() == "localize") {
      eval_localize(eval_args, out);
    } else if (leaf->get_name() == "explain") {
      eval_explain(eval_args, out);
    } else if (leaf == matrix) {
      eval_matrix(eval_args, out);
    } else if (leaf == corpus_cmd) {
      stats_corpus(stats_args, out);
    } else if (leaf == build) {
      prompt_build(prompt_args, out);
    } else if (leaf == serve_cmd) {
      serve(serve_args, out);
    } else if (leaf == info) {
      need(dump_path, "--features");
      const auto d = features::read_dump_file(dump_path);
      out << "samples: " << d.num_samples() << "\nlayers: " << d.num_layers() << "\ndim: " << d.dim()
          << "\nids: " << d.sample_ids().size() << "\n";
    }
  } catch (const CLI::ParseError& e) {
    err << "error: invalid configured value: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return e.kind() == ErrorKind::kIo ? 2 : 1;
  } catch (const json::exception& e) {
    err << "error (format): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  out.flush();
  return 0;
}

}  // namespace manipshield::cli
