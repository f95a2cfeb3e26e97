#include "manipshield/annotation.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "manipshield/decoders.hpp"
#include "manipshield/error.hpp"
#include "manipshield/taxonomy.hpp"

namespace manipshield::annotation {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::string_view kStageNames[] = {"draft", "submitted", "verified", "disputed",
                                            "arbitrated"};

bool is_active(Stage s) { return s != Stage::kArbitrated; }

}  // namespace

std::string_view to_string(Stage s) { return kStageNames[static_cast<std::size_t>(s)]; }

Stage parse_stage(std::string_view s) {
  for (std::size_t i = 0; i < std::size(kStageNames); ++i) {
    if (kStageNames[i] == s) return static_cast<Stage>(i);
  }
  fail(ErrorKind::kValidation, "unknown stage '" + std::string(s) + "'");
}

bool transition_allowed(Stage from, Stage to) {
  switch (from) {
    case Stage::kDraft: return to == Stage::kSubmitted;
    case Stage::kSubmitted: return to == Stage::kVerified || to == Stage::kDisputed;
    case Stage::kVerified: return to == Stage::kArbitrated;
    case Stage::kDisputed: return to == Stage::kArbitrated;
    case Stage::kArbitrated: return false;
  }
  return false;
}

std::vector<std::string> box_problems(const std::vector<AnnotatedBox>& boxes) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i].box;
    const std::string at = "boxes[" + std::to_string(i) + "]";
    const double c[4] = {b.x0, b.y0, b.x1, b.y1};
    bool finite = true;
    for (double v : c) finite = finite && std::isfinite(v);
    if (!finite) {
      out.push_back(at + ": coordinates must be finite");
      continue;
    }
    if (b.x0 > b.x1) out.push_back(at + ": x0 > x1");
    if (b.y0 > b.y1) out.push_back(at + ": y0 > y1");
    for (double v : c) {
      if (v < 0.0 || v > 1.0) {
        out.push_back(at + ": coordinates must lie in [0, 1]");
        break;
      }
    }
    if (boxes[i].cues.empty()) out.push_back(at + ": at least one cue is required");
    for (const auto& cue : boxes[i].cues) {
      if (!cue_index(cue)) out.push_back(at + ": unknown cue '" + cue + "'");
    }
  }
  return out;
}

Clock system_clock() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

ordered_json to_json(const AnnotatedBox& b) {
  return {{"box", {b.box.x0, b.box.y0, b.box.x1, b.box.y1}}, {"cues", b.cues}};
}

std::vector<AnnotatedBox> boxes_from_json(const json& j) {
  if (!j.is_array()) fail(ErrorKind::kValidation, "boxes must be an array");
  std::vector<AnnotatedBox> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    const auto at = "boxes[" + std::to_string(i) + "]";
    if (!e.is_object() || !e.contains("box") || !e["box"].is_array() || e["box"].size() != 4) {
      fail(ErrorKind::kValidation, at + ": expected {box: [x0, y0, x1, y1], cues: [...]}");
    }
    AnnotatedBox b;
    try {
      b.box = {e["box"][0].get<double>(), e["box"][1].get<double>(), e["box"][2].get<double>(),
               e["box"][3].get<double>()};
      if (e.contains("cues")) b.cues = e["cues"].get<std::vector<std::string>>();
    } catch (const json::exception&) {
      fail(ErrorKind::kValidation, at + ": malformed box");
    }
    out.push_back(std::move(b));
  }
  return out;
}

namespace {

ordered_json boxes_json(const std::vector<AnnotatedBox>& boxes) {
  ordered_json a = ordered_json::array();
  for (const auto& b : boxes) a.push_back(to_json(b));
  return a;
}

ordered_json history_json(const HistoryEntry& h) {
  ordered_json j;
  j["actor"] = h.actor;
  j["action"] = h.action;
  j["timestamp"] = h.timestamp;
  j["boxes"] = boxes_json(h.boxes);
  if (h.previous_boxes) j["previous_boxes"] = boxes_json(*h.previous_boxes);
  j["notes"] = h.notes;
  j["flags"] = h.flags;
  return j;
}

HistoryEntry history_from_json(const json& j) {
  HistoryEntry h;
  h.actor = j.at("actor").get<std::string>();
  h.action = j.at("action").get<std::string>();
  h.timestamp = j.at("timestamp").get<std::int64_t>();
  h.boxes = boxes_from_json(j.at("boxes"));
  if (j.contains("previous_boxes")) h.previous_boxes = boxes_from_json(j["previous_boxes"]);
  h.notes = j.at("notes").get<std::string>();
  h.flags = j.at("flags").get<std::vector<std::string>>();
  return h;
}

AnnotationRecord record_from_json(const json& j) {
  AnnotationRecord r;
  r.record_id = j.at("record_id").get<std::string>();
  r.image_id = j.at("image_id").get<std::string>();
  r.annotator_id = j.at("annotator_id").get<std::string>();
  r.stage = parse_stage(j.at("stage").get<std::string>());
  r.boxes = boxes_from_json(j.at("boxes"));
  for (const auto& h : j.at("history")) r.history.push_back(history_from_json(h));
  return r;
}

ordered_json image_json(const ImageEntry& e) {
  ordered_json j;
  j["image_id"] = e.image_id;
  j["path"] = e.path;
  j["pair_image_id"] = e.pair_image_id ? ordered_json(*e.pair_image_id) : ordered_json(nullptr);
  return j;
}

ImageEntry image_from_json(const json& j) {
  ImageEntry e;
  e.image_id = j.at("image_id").get<std::string>();
  e.path = j.value("path", std::string{});
  if (j.contains("pair_image_id") && !j["pair_image_id"].is_null()) {
    e.pair_image_id = j["pair_image_id"].get<std::string>();
  }
  return e;
}

// Deduplicates and orders cues by taxonomy position.
std::vector<AnnotatedBox> canonical_cues(std::vector<AnnotatedBox> boxes) {
  for (auto& b : boxes) {
    std::sort(b.cues.begin(), b.cues.end(), [](const std::string& x, const std::string& y) {
      return cue_index(x).value_or(kNumCues) < cue_index(y).value_or(kNumCues) ||
             (cue_index(x) == cue_index(y) && x < y);
    });
    b.cues.erase(std::unique(b.cues.begin(), b.cues.end()), b.cues.end());
  }
  return boxes;
}

std::string format_record_id(std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rec-%06llu", static_cast<unsigned long long>(n));
  return buf;
}

}  // namespace

ordered_json to_json(const AnnotationRecord& r) {
  ordered_json j;
  j["record_id"] = r.record_id;
  j["image_id"] = r.image_id;
  j["annotator_id"] = r.annotator_id;
  j["stage"] = to_string(r.stage);
  j["boxes"] = boxes_json(r.boxes);
  ordered_json h = ordered_json::array();
  for (const auto& e : r.history) h.push_back(history_json(e));
  j["history"] = std::move(h);
  return j;
}

struct AnnotationStore::State {
  std::map<std::string, ImageEntry> images;
  std::map<std::string, AnnotationRecord> records;
  std::uint64_t next_record = 1;
  std::uint64_t seq = 0;

  const AnnotationRecord& record(const std::string& id) const {
    auto it = records.find(id);
    if (it == records.end()) fail(ErrorKind::kNotFound, "no record '" + id + "'");
    return it->second;
  }

  void check_unique_active(const std::string& image, const std::string& annotator,
                           const std::string& except) const {
    for (const auto& [id, r] : records) {
      if (id != except && r.image_id == image && r.annotator_id == annotator && is_active(r.stage)) {
        fail(ErrorKind::kConflict, "annotator '" + annotator + "' already has active record '" + id +
                                       "' for image '" + image + "'");
      }
    }
  }

  // Validates the event against the current state; applies it unless dry_run.
  // Never mutates before all checks pass.
  void apply(const json& ev, bool dry_run) {
    const std::string type = ev.at("type").get<std::string>();
    const std::int64_t ts = ev.at("timestamp").get<std::int64_t>();

    if (type == "register_image") {
      ImageEntry e = image_from_json(ev.at("image"));
      if (e.image_id.empty()) fail(ErrorKind::kValidation, "image_id is required");
      if (auto it = images.find(e.image_id); it != images.end() && !(it->second == e)) {
        fail(ErrorKind::kConflict, "image '" + e.image_id + "' is already registered differently");
      }
      if (dry_run) return;
      images[e.image_id] = std::move(e);
    } else if (type == "save_draft" || type == "submit") {
      const bool submit = type == "submit";
      const std::string image_id = ev.at("image_id").get<std::string>();
      const std::string annotator = ev.at("annotator_id").get<std::string>();
      auto boxes = canonical_cues(boxes_from_json(ev.at("boxes")));
      std::string record_id = ev.value("record_id", std::string{});

      std::vector<std::string> problems = box_problems(boxes);
      if (annotator.empty()) problems.insert(problems.begin(), "annotator_id: required");
      if (!problems.empty()) {
        std::string msg = "invalid annotation:";
        for (const auto& p : problems) msg += " " + p + ";";
        fail(ErrorKind::kValidation, msg);
      }
      if (!images.contains(image_id)) fail(ErrorKind::kNotFound, "image '" + image_id + "' is not registered");
      if (!record_id.empty()) {
        const auto& existing = record(record_id);
        if (existing.stage != Stage::kDraft) {
          fail(ErrorKind::kState, "record '" + record_id + "' is " +
                                      std::string(to_string(existing.stage)) + ", not draft");
        }
        if (existing.annotator_id != annotator || existing.image_id != image_id) {
          fail(ErrorKind::kPolicy, "record '" + record_id + "' belongs to another annotator or image");
        }
      }
      check_unique_active(image_id, annotator, record_id);
      if (dry_run) return;

      if (record_id.empty()) {
        record_id = format_record_id(next_record++);
        AnnotationRecord r;
        r.record_id = record_id;
        r.image_id = image_id;
        r.annotator_id = annotator;
        records[record_id] = std::move(r);
      }
      auto& r = records[record_id];
      r.boxes = boxes;
      r.stage = submit ? Stage::kSubmitted : Stage::kDraft;
      r.history.push_back({annotator, submit ? "submit" : "draft", ts, boxes, std::nullopt, "", {}});
    } else if (type == "review") {
      const std::string record_id = ev.at("record_id").get<std::string>();
      const std::string reviewer = ev.at("reviewer_id").get<std::string>();
      const std::string verdict = ev.at("verdict").get<std::string>();
      if (verdict != "accept" && verdict != "dispute") {
        fail(ErrorKind::kValidation, "verdict must be accept or dispute");
      }
      if (reviewer.empty()) fail(ErrorKind::kValidation, "reviewer_id: required");
      const auto& r = record(record_id);
      const Stage to = verdict == "accept" ? Stage::kVerified : Stage::kDisputed;
      if (!transition_allowed(r.stage, to)) {
        fail(ErrorKind::kState, "cannot review record '" + record_id + "' in stage " +
                                    std::string(to_string(r.stage)));
      }
      if (reviewer == r.annotator_id) {
        fail(ErrorKind::kPolicy, "annotators may not review their own record");
      }
      if (dry_run) return;
      auto& m = records[record_id];
      m.stage = to;
      m.history.push_back({reviewer, verdict, ts, m.boxes, std::nullopt,
                           ev.value("notes", std::string{}), {}});
    } else if (type == "arbitrate") {
      const std::string record_id = ev.at("record_id").get<std::string>();
      const std::string expert = ev.at("expert_id").get<std::string>();
      auto boxes = canonical_cues(boxes_from_json(ev.at("boxes")));
      if (expert.empty()) fail(ErrorKind::kValidation, "expert_id: required");
      const auto problems = box_problems(boxes);
      if (!problems.empty()) {
        std::string msg = "invalid arbitration:";
        for (const auto& p : problems) msg += " " + p + ";";
        fail(ErrorKind::kValidation, msg);
      }
      const auto& r = record(record_id);
      if (!transition_allowed(r.stage, Stage::kArbitrated)) {
        fail(ErrorKind::kState, "cannot arbitrate record '" + record_id + "' in stage " +
                                    std::string(to_string(r.stage)));
      }
      if (dry_run) return;
      auto& m = records[record_id];
      std::vector<std::string> flags;
      if (m.stage == Stage::kVerified) flags.emplace_back("spot-check override");
      m.history.push_back({expert, "arbitrate", ts, boxes, m.boxes, ev.value("notes", std::string{}),
                           std::move(flags)});
      m.boxes = std::move(boxes);
      m.stage = Stage::kArbitrated;
    } else {
      fail(ErrorKind::kFormat, "unknown event type '" + type + "'");
    }
    seq = ev.at("seq").get<std::uint64_t>();
  }

  ordered_json to_json_doc() const {
    ordered_json j;
    j["seq"] = seq;
    j["next_record"] = next_record;
    ordered_json im = ordered_json::array();
    for (const auto& [id, e] : images) im.push_back(image_json(e));
    j["images"] = std::move(im);
    ordered_json rs = ordered_json::array();
    for (const auto& [id, r] : records) rs.push_back(annotation::to_json(r));
    j["records"] = std::move(rs);
    return j;
  }

  static State from_json_doc(const json& j) {
    State s;
    s.seq = j.at("seq").get<std::uint64_t>();
    s.next_record = j.at("next_record").get<std::uint64_t>();
    for (const auto& e : j.at("images")) {
      auto img = image_from_json(e);
      s.images[img.image_id] = img;
    }
    for (const auto& e : j.at("records")) {
      auto r = record_from_json(e);
      s.records[r.record_id] = std::move(r);
    }
    return s;
  }
};

namespace {

std::string snapshot_path(const std::string& log) { return log + ".snapshot"; }

void write_all(int fd, const std::string& data, const std::string& path) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) fail(ErrorKind::kIo, "write to '" + path + "' failed");
    off += static_cast<std::size_t>(n);
  }
}

}  // namespace

AnnotationStore::AnnotationStore(std::string log_path, Clock clock)
    : log_path_(std::move(log_path)), clock_(std::move(clock)), state_(std::make_unique<State>()) {
  if (log_path_.empty()) return;

  if (std::ifstream snap(snapshot_path(log_path_)); snap) {
    try {
      *state_ = State::from_json_doc(json::parse(snap));
    } catch (const json::exception& e) {
      fail(ErrorKind::kFormat, std::string("corrupt snapshot: ") + e.what());
    }
  }

  std::string content;
  if (std::ifstream in(log_path_, std::ios::binary); in) {
    std::ostringstream ss;
    ss << in.rdbuf();
    content = ss.str();
  }
  std::size_t good = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    const std::size_t nl = content.find('\n', pos);
    if (nl == std::string::npos) break;  // torn tail
    const std::string line = content.substr(pos, nl - pos);
    json ev;
    try {
      ev = json::parse(line);
    } catch (const json::exception&) {
      // Only the final line may be damaged by a crash.
      if (content.find('\n', nl + 1) == std::string::npos && nl + 1 >= content.size()) break;
      fail(ErrorKind::kFormat, "corrupt event in log '" + log_path_ + "'");
    }
    if (ev.at("seq").get<std::uint64_t>() > state_->seq) state_->apply(ev, false);
    pos = nl + 1;
    good = pos;
  }

  log_fd_ = ::open(log_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (log_fd_ < 0) fail(ErrorKind::kIo, "cannot open log '" + log_path_ + "'");
  if (good != content.size() && ::ftruncate(log_fd_, static_cast<off_t>(good)) != 0) {
    fail(ErrorKind::kIo, "cannot truncate torn log tail");
  }
}

AnnotationStore::~AnnotationStore() {
  if (log_fd_ >= 0) ::close(log_fd_);
}

void AnnotationStore::commit(json event) {
  // Caller holds the unique lock.
  event["seq"] = state_->seq + 1;
  event["timestamp"] = clock_();
  state_->apply(event, true);
  if (log_fd_ >= 0) {
    write_all(log_fd_, event.dump() + "\n", log_path_);
    if (::fsync(log_fd_) != 0) fail(ErrorKind::kIo, "fsync failed on '" + log_path_ + "'");
  }
  state_->apply(event, false);
}

ImageEntry AnnotationStore::register_image(const ImageEntry& image) {
  std::unique_lock lock(mutex_);
  if (auto it = state_->images.find(image.image_id); it != state_->images.end() && it->second == image) {
    return image;
  }
  commit({{"type", "register_image"}, {"image", image_json(image)}});
  return state_->images.at(image.image_id);
}

namespace {

json record_event(const char* type, const AnnotationRecord& r) {
  json ev = {{"type", type},
             {"image_id", r.image_id},
             {"annotator_id", r.annotator_id},
             {"boxes", boxes_json(r.boxes)}};
  if (!r.record_id.empty()) ev["record_id"] = r.record_id;
  return ev;
}

}  // namespace

AnnotationRecord AnnotationStore::save_draft(const AnnotationRecord& record) {
  std::unique_lock lock(mutex_);
  const std::string id = record.record_id.empty() ? format_record_id(state_->next_record) : record.record_id;
  commit(record_event("save_draft", record));
  return state_->records.at(id);
}

AnnotationRecord AnnotationStore::submit_annotation(const AnnotationRecord& record) {
  std::unique_lock lock(mutex_);
  const std::string id = record.record_id.empty() ? format_record_id(state_->next_record) : record.record_id;
  commit(record_event("submit", record));
  return state_->records.at(id);
}

AnnotationRecord AnnotationStore::review(const ReviewDecision& d) {
  std::unique_lock lock(mutex_);
  commit({{"type", "review"},
          {"record_id", d.record_id},
          {"reviewer_id", d.reviewer_id},
          {"verdict", d.verdict == ReviewVerdict::kAccept ? "accept" : "dispute"},
          {"notes", d.notes}});
  return state_->records.at(d.record_id);
}

AnnotationRecord AnnotationStore::arbitrate(const std::string& record_id, const std::string& expert_id,
                                            const std::vector<AnnotatedBox>& final_boxes,
                                            const std::string& notes) {
  std::unique_lock lock(mutex_);
  commit({{"type", "arbitrate"},
          {"record_id", record_id},
          {"expert_id", expert_id},
          {"boxes", boxes_json(final_boxes)},
          {"notes", notes}});
  return state_->records.at(record_id);
}

std::optional<AnnotationRecord> AnnotationStore::get(const std::string& record_id) const {
  std::shared_lock lock(mutex_);
  auto it = state_->records.find(record_id);
  if (it == state_->records.end()) return std::nullopt;
  return it->second;
}

std::optional<ImageEntry> AnnotationStore::image(const std::string& image_id) const {
  std::shared_lock lock(mutex_);
  auto it = state_->images.find(image_id);
  if (it == state_->images.end()) return std::nullopt;
  return it->second;
}

std::vector<AnnotationRecord> AnnotationStore::records(std::optional<Stage> stage) const {
  std::shared_lock lock(mutex_);
  std::vector<AnnotationRecord> out;
  for (const auto& [id, r] : state_->records) {
    if (!stage || r.stage == *stage) out.push_back(r);
  }
  return out;
}

Agreement AnnotationStore::agreement(const std::string& image_id, const std::string& a,
                                     const std::string& b) const {
  std::shared_lock lock(mutex_);
  auto latest = [&](const std::string& annotator) -> const AnnotationRecord& {
    const AnnotationRecord* found = nullptr;
    for (const auto& [id, r] : state_->records) {
      if (r.image_id == image_id && r.annotator_id == annotator && r.stage != Stage::kDraft) found = &r;
    }
    if (!found) {
      fail(ErrorKind::kNotFound, "no submitted record by '" + annotator + "' for image '" + image_id + "'");
    }
    return *found;
  };
  const auto& ra = latest(a);
  const auto& rb = latest(b);
  std::vector<decoders::ScoredBox> pa;
  std::vector<Box> pb;
  for (const auto& x : ra.boxes) pa.push_back({x.box, 1.0});
  for (const auto& x : rb.boxes) pb.push_back(x.box);
  const auto matches = decoders::match_boxes(pa, pb);

  Agreement g;
  g.matched = matches.size();
  const std::size_t denom = pa.size() + pb.size() - matches.size();
  double iou_sum = 0.0, cue_sum = 0.0;
  for (const auto& [i, j] : matches) {
    iou_sum += box_iou(pa[i].box, pb[j]);
    const std::set<std::string> ca(ra.boxes[i].cues.begin(), ra.boxes[i].cues.end());
    const std::set<std::string> cb(rb.boxes[j].cues.begin(), rb.boxes[j].cues.end());
    std::size_t inter = 0;
    for (const auto& c : ca) inter += cb.count(c);
    const std::size_t uni = ca.size() + cb.size() - inter;
    cue_sum += uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
  }
  g.mean_box_iou = denom == 0 ? 1.0 : iou_sum / static_cast<double>(denom);
  g.cue_agreement_defined = !matches.empty();
  g.cue_agreement = matches.empty() ? 0.0 : cue_sum / static_cast<double>(matches.size());
  return g;
}

Task AnnotationStore::next_task(const std::string& annotator_id) const {
  std::shared_lock lock(mutex_);
  Task t;
  t.kind = "none";
  if (annotator_id.empty()) fail(ErrorKind::kValidation, "annotator is required");
  std::set<std::string> touched;
  for (const auto& [id, r] : state_->records) {
    if (r.annotator_id == annotator_id) touched.insert(r.image_id);
  }
  for (const auto& [id, img] : state_->images) {
    if (!touched.contains(id)) {
      t.kind = "annotate";
      t.image_id = id;
      t.pair_image_id = img.pair_image_id;
      return t;
    }
  }
  for (const auto& [id, r] : state_->records) {
    if (r.stage == Stage::kSubmitted && r.annotator_id != annotator_id) {
      t.kind = "review";
      t.record_id = id;
      t.image_id = r.image_id;
      t.pair_image_id = state_->images.at(r.image_id).pair_image_id;
      return t;
    }
  }
  return t;
}

std::string AnnotationStore::export_jsonl(std::optional<Stage> stage) const {
  std::shared_lock lock(mutex_);
  std::string out;
  for (const auto& [id, r] : state_->records) {
    if (stage && r.stage != *stage) continue;
    std::vector<std::string> all;
    for (const auto& b : r.boxes) all.insert(all.end(), b.cues.begin(), b.cues.end());
    std::sort(all.begin(), all.end(), [](const std::string& x, const std::string& y) {
      return cue_index(x).value_or(kNumCues) < cue_index(y).value_or(kNumCues);
    });
    all.erase(std::unique(all.begin(), all.end()), all.end());
    ordered_json j;
    j["image_id"] = r.image_id;
    j["record_id"] = r.record_id;
    j["annotator_id"] = r.annotator_id;
    j["stage"] = to_string(r.stage);
    j["boxes"] = boxes_json(r.boxes);
    j["cues"] = all;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string AnnotationStore::state_json() const {
  std::shared_lock lock(mutex_);
  return state_->to_json_doc().dump(2);
}

void AnnotationStore::compact() {
  std::unique_lock lock(mutex_);
  if (log_path_.empty()) return;
  const std::string snap = snapshot_path(log_path_);
  const std::string tmp = snap + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) fail(ErrorKind::kIo, "cannot open '" + tmp + "'");
  try {
    write_all(fd, state_->to_json_doc().dump(), tmp);
  } catch (...) {
    ::close(fd);
    throw;
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) fail(ErrorKind::kIo, "cannot flush snapshot");
  if (std::rename(tmp.c_str(), snap.c_str()) != 0) fail(ErrorKind::kIo, "cannot install snapshot");
  // Events up to the snapshot's seq are skipped on replay, so a crash before
  // this truncation is harmless.
  if (::ftruncate(log_fd_, 0) != 0) fail(ErrorKind::kIo, "cannot truncate log");
}

std::size_t AnnotationStore::event_count() const {
  std::shared_lock lock(mutex_);
  return static_cast<std::size_t>(state_->seq);
}

}  // namespace manipshield::annotation
