#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "manipshield/geometry.hpp"

namespace manipshield::annotation {

// Three-stage protocol: independent labeling (draft -> submitted),
// cross-verification by a different annotator (-> verified | disputed), and
// expert arbitration (-> arbitrated). Verified records may also be
// arbitrated as a flagged spot-check override.
enum class Stage { kDraft, kSubmitted, kVerified, kDisputed, kArbitrated };

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);
bool transition_allowed(Stage from, Stage to);

struct AnnotatedBox {
  Box box;
  std::vector<std::string> cues;

  friend bool operator==(const AnnotatedBox&, const AnnotatedBox&) = default;
};

struct HistoryEntry {
  std::string actor;
  std::string action;
  std::int64_t timestamp = 0;
  std::vector<AnnotatedBox> boxes;           // boxes as of this action
  std::optional<std::vector<AnnotatedBox>> previous_boxes;
  std::string notes;
  std::vector<std::string> flags;

  friend bool operator==(const HistoryEntry&, const HistoryEntry&) = default;
};

struct AnnotationRecord {
  std::string record_id;
  std::string image_id;
  std::string annotator_id;
  std::vector<AnnotatedBox> boxes;
  Stage stage = Stage::kDraft;
  std::vector<HistoryEntry> history;

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

struct ImageEntry {
  std::string image_id;
  std::string path;
  std::optional<std::string> pair_image_id;

  friend bool operator==(const ImageEntry&, const ImageEntry&) = default;
};

enum class ReviewVerdict { kAccept, kDispute };

struct ReviewDecision {
  std::string record_id;
  std::string reviewer_id;
  ReviewVerdict verdict = ReviewVerdict::kAccept;
  std::string notes;
};

struct Agreement {
  double mean_box_iou = 0.0;
  double cue_agreement = 0.0;
  bool cue_agreement_defined = false;
  std::size_t matched = 0;
};

struct Task {
  std::string kind;  // "annotate", "review" or "none"
  std::optional<std::string> image_id;
  std::optional<std::string> record_id;
  std::optional<std::string> pair_image_id;
};

// Empty list when the boxes are valid; otherwise one message per problem,
// each naming the box index.
std::vector<std::string> box_problems(const std::vector<AnnotatedBox>& boxes);

using Clock = std::function<std::int64_t()>;
Clock system_clock();

// Annotation state derived from an append-only event log. Every mutation is
// validated, appended to the log as one newline-terminated JSON line and
// fsync'd, then applied. On open the log is replayed; a torn final line is
// discarded, so a crash mid-write leaves either the whole event or none.
// Readers share a lock; writers are serialized.
class AnnotationStore {
 public:
  // Empty log_path keeps everything in memory.
  explicit AnnotationStore(std::string log_path = {}, Clock clock = system_clock());
  ~AnnotationStore();

  AnnotationStore(const AnnotationStore&) = delete;
  AnnotationStore& operator=(const AnnotationStore&) = delete;

  ImageEntry register_image(const ImageEntry& image);
  AnnotationRecord save_draft(const AnnotationRecord& record);
  AnnotationRecord submit_annotation(const AnnotationRecord& record);
  AnnotationRecord review(const ReviewDecision& decision);
  AnnotationRecord arbitrate(const std::string& record_id, const std::string& expert_id,
                             const std::vector<AnnotatedBox>& final_boxes,
                             const std::string& notes = {});

  std::optional<AnnotationRecord> get(const std::string& record_id) const;
  std::optional<ImageEntry> image(const std::string& image_id) const;
  std::vector<AnnotationRecord> records(std::optional<Stage> stage = {}) const;
  Agreement agreement(const std::string& image_id, const std::string& annotator_a,
                      const std::string& annotator_b) const;
  Task next_task(const std::string& annotator_id) const;

  // One JSON object per line: image_id, record_id, annotator_id, stage, boxes
  // (box + cues) and the union of cues. Ground-truth input for evaluation.
  std::string export_jsonl(std::optional<Stage> stage = {}) const;
  // Canonical dump of the full state, history included.
  std::string state_json() const;

  // Writes a snapshot next to the log (atomic rename) and empties the log.
  void compact();

  std::size_t event_count() const;
  const std::string& log_path() const { return log_path_; }

  struct State;

 private:
  void commit(nlohmann::json event);

  std::string log_path_;
  Clock clock_;
  mutable std::shared_mutex mutex_;
  std::unique_ptr<State> state_;
  int log_fd_ = -1;
};

nlohmann::ordered_json to_json(const AnnotationRecord& r);
nlohmann::ordered_json to_json(const AnnotatedBox& b);
std::vector<AnnotatedBox> boxes_from_json(const nlohmann::json& j);

}  // namespace manipshield::annotation
