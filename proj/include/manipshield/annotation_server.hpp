#pragma once

#include <memory>
#include <string>

#include "manipshield/annotation.hpp"
#include "manipshield/error.hpp"

namespace manipshield::annotation {

struct ServerOptions {
  std::string images_dir;  // served under /files when set
  std::string ui_dir;      // served under / when set
  std::size_t threads = 8;
};

// HTTP front end for an AnnotationStore. Request and response bodies are
// JSON; the annotator may be given in the body or the X-Annotator-Id header.
//
//   POST /images               {image_id, path?, pair_image_id?}
//   GET  /tasks/next?annotator=ID
//   POST /annotations          {record_id?, image_id, annotator_id, boxes, submit=true}
//   POST /reviews              {record_id, reviewer_id, verdict, notes?}
//   POST /arbitrations         {record_id, expert_id, boxes, notes?}
//   GET  /annotations/{id}
//   GET  /annotations?stage=S
//   GET  /export?stage=S       one JSON object per line
//   GET  /agreement?image=&a=&b=
//
// Errors come back as {"error": kind, "message": text} with 400 (format),
// 403 (policy), 404 (not found), 409 (state, conflict) or 422 (validation).
class AnnotationServer {
 public:
  AnnotationServer(AnnotationStore& store, ServerOptions options = {});
  ~AnnotationServer();

  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  // Binds to an ephemeral port and returns it; -1 on failure.
  int bind_any(const std::string& host);
  bool bind(const std::string& host, int port);
  // Blocks until stop().
  bool listen();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

int http_status(ErrorKind kind);

}  // namespace manipshield::annotation
