#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "idt/illuminate.hpp"

namespace idt {

struct ApiOptions {
  bool on_demand_viz = false;    // compute missing visualisations on request
  std::filesystem::path ui_dir;  // static bundle mounted at "/" when set
};

// HTTP front end over a Session. Until a session is attached every /api
// route answers 503.
class ExplorerApi {
 public:
  explicit ExplorerApi(ApiOptions options = {});
  ~ExplorerApi();
  ExplorerApi(const ExplorerApi&) = delete;
  ExplorerApi& operator=(const ExplorerApi&) = delete;

  void attach(std::shared_ptr<Session> session);

  // port 0 picks a free port. Returns the bound port, or -1.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  bool serve();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace idt
