#include "manipshield/annotation_server.hpp"

#include "httplib.h"
#include "json.hpp"

namespace manipshield::annotation {

using nlohmann::json;
using nlohmann::ordered_json;

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kValidation: return 422;
    case ErrorKind::kNotFound: return 404;
    case ErrorKind::kConflict:
    case ErrorKind::kState: return 409;
    case ErrorKind::kPolicy: return 403;
    case ErrorKind::kFormat: return 400;
    default: return 500;
  }
}

namespace {

void send_json(httplib::Response& res, const ordered_json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, ErrorKind kind, const std::string& message) {
  ordered_json body;
  body["error"] = to_string(kind);
  body["message"] = message;
  send_json(res, body, http_status(kind));
}

json parse_body(const httplib::Request& req) {
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) fail(ErrorKind::kFormat, "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kFormat, std::string("malformed JSON: ") + e.what());
  }
}

std::string field(const json& j, const char* key, bool required = true) {
  if (!j.contains(key) || j[key].is_null()) {
    if (required) fail(ErrorKind::kValidation, std::string(key) + ": required");
    return {};
  }
  if (!j[key].is_string()) fail(ErrorKind::kValidation, std::string(key) + ": must be a string");
  return j[key].get<std::string>();
}

// Body field, falling back to the X-Annotator-Id header.
std::string actor(const httplib::Request& req, const json& body, const char* key) {
  std::string id = field(body, key, false);
  if (id.empty()) id = req.get_header_value("X-Annotator-Id");
  if (id.empty()) fail(ErrorKind::kValidation, std::string(key) + ": required");
  return id;
}

std::optional<Stage> stage_param(const httplib::Request& req) {
  if (!req.has_param("stage")) return std::nullopt;
  return parse_stage(req.get_param_value("stage"));
}

ordered_json task_json(const Task& t) {
  ordered_json j;
  j["kind"] = t.kind;
  j["image_id"] = t.image_id ? ordered_json(*t.image_id) : ordered_json(nullptr);
  j["record_id"] = t.record_id ? ordered_json(*t.record_id) : ordered_json(nullptr);
  j["pair_image_id"] = t.pair_image_id ? ordered_json(*t.pair_image_id) : ordered_json(nullptr);
  return j;
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.kind(), e.what());
    } catch (const json::exception& e) {
      send_error(res, ErrorKind::kValidation, e.what());
    }
  };
}

}  // namespace

struct AnnotationServer::Impl {
  AnnotationStore& store;
  ServerOptions options;
  httplib::Server server;

  Impl(AnnotationStore& s, ServerOptions o) : store(s), options(std::move(o)) {
    const std::size_t threads = std::max<std::size_t>(1, options.threads);
    server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    routes();
  }

  void routes() {
    server.Post("/images", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      ImageEntry e;
      e.image_id = field(body, "image_id");
      e.path = field(body, "path", false);
      if (auto pair = field(body, "pair_image_id", false); !pair.empty()) e.pair_image_id = pair;
      const auto saved = store.register_image(e);
      ordered_json j;
      j["image_id"] = saved.image_id;
      j["path"] = saved.path;
      j["pair_image_id"] = saved.pair_image_id ? ordered_json(*saved.pair_image_id) : ordered_json(nullptr);
      send_json(res, j, 201);
    }));

    server.Get("/tasks/next", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::string who = req.get_param_value("annotator");
      if (who.empty()) who = req.get_header_value("X-Annotator-Id");
      send_json(res, task_json(store.next_task(who)));
    }));

    server.Post("/annotations", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      AnnotationRecord r;
      r.record_id = field(body, "record_id", false);
      r.image_id = field(body, "image_id");
      r.annotator_id = actor(req, body, "annotator_id");
      if (!body.contains("boxes")) fail(ErrorKind::kValidation, "boxes: required");
      r.boxes = boxes_from_json(body["boxes"]);
      const bool submit = body.value("submit", true);
      const auto saved = submit ? store.submit_annotation(r) : store.save_draft(r);
      send_json(res, to_json(saved), 201);
    }));

    server.Post("/reviews", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      ReviewDecision d;
      d.record_id = field(body, "record_id");
      d.reviewer_id = actor(req, body, "reviewer_id");
      const std::string verdict = field(body, "verdict");
      if (verdict == "accept") {
        d.verdict = ReviewVerdict::kAccept;
      } else if (verdict == "dispute") {
        d.verdict = ReviewVerdict::kDispute;
      } else {
        fail(ErrorKind::kValidation, "verdict: must be accept or dispute");
      }
      d.notes = field(body, "notes", false);
      send_json(res, to_json(store.review(d)));
    }));

    server.Post("/arbitrations", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const std::string record_id = field(body, "record_id");
      const std::string expert = actor(req, body, "expert_id");
      if (!body.contains("boxes")) fail(ErrorKind::kValidation, "boxes: required");
      const auto boxes = boxes_from_json(body["boxes"]);
      send_json(res, to_json(store.arbitrate(record_id, expert, boxes, field(body, "notes", false))));
    }));

    server.Get(R"(/annotations/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      auto r = store.get(id);
      if (!r) fail(ErrorKind::kNotFound, "no record '" + id + "'");
      send_json(res, to_json(*r));
    }));

    server.Get("/annotations", guarded([this](const httplib::Request& req, httplib::Response& res) {
      ordered_json list = ordered_json::array();
      for (const auto& r : store.records(stage_param(req))) list.push_back(to_json(r));
      send_json(res, list);
    }));

    server.Get("/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      res.set_content(store.export_jsonl(stage_param(req)), "application/x-ndjson");
    }));

    server.Get("/agreement", guarded([this](const httplib::Request& req, httplib::Response& res) {
      for (const char* p : {"image", "a", "b"}) {
        if (!req.has_param(p)) fail(ErrorKind::kValidation, std::string(p) + ": required");
      }
      const auto g = store.agreement(req.get_param_value("image"), req.get_param_value("a"),
                                     req.get_param_value("b"));
      ordered_json j;
      j["mean_box_iou"] = g.mean_box_iou;
      j["cue_agreement"] = g.cue_agreement;
      j["cue_agreement_defined"] = g.cue_agreement_defined;
      j["matched"] = g.matched;
      send_json(res, j);
    }));

    server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("{\"status\":\"ok\"}", "application/json");
    });

    if (!options.images_dir.empty()) server.set_mount_point("/files", options.images_dir);
    if (!options.ui_dir.empty()) server.set_mount_point("/", options.ui_dir);
  }
};

AnnotationServer::AnnotationServer(AnnotationStore& store, ServerOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(options))) {}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind_any(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool AnnotationServer::bind(const std::string& host, int port) {
  return impl_->server.bind_to_port(host, port);
}

bool AnnotationServer::listen() { return impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
  if (impl_) impl_->server.stop();
}

void AnnotationServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace manipshield::annotation
