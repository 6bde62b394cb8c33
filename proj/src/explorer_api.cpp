#include "idt/explorer_api.hpp"

#include <atomic>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "idt/error.hpp"
#include "idt/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

struct ExplorerApi::Impl {
  ApiOptions options;
  httplib::Server server;
  std::shared_ptr<Session> session;  // read and written with std::atomic_load/store

  std::shared_ptr<Session> current() const { return std::atomic_load(&session); }
  void routes();
};

namespace {

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, std::string_view message) {
  send_json(res, {{"error", code}, {"message", message}}, status);
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kBadFeatureName:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kDimensionMismatch:
      return 400;
    case ErrorCode::kOutOfRange:
    case ErrorCode::kMissingVisualization:
      return 404;
    case ErrorCode::kBusy:
      return 409;
    default:
      return 500;
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string image_mime(const fs::path& path) {
  std::string ext = path.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png" ? "image/png" : "image/jpeg";
}

json tree_payload(const SessionEntry& e) {
  return {{"history_index", e.index}, {"tree", illuminated_tree_to_json(e.itree)}};
}

}  // namespace

void ExplorerApi::Impl::routes() {
  // Every /api handler goes through `with_session`, which answers 503
  // until a session is attached and maps library errors to statuses.
  auto with_session = [this](auto fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      const auto s = current();
      if (!s) {
        send_error(res, 503, "Initializing", "session is still loading");
        return;
      }
      try {
        fn(*s, req, res);
      } catch (const Error& e) {
        send_error(res, status_for(e.code()), error_code_name(e.code()), e.what());
      } catch (const json::exception& e) {
        send_error(res, 400, "InvalidArgument", e.what());
      }
    };
  };

  server.Get("/api/tree", with_session([](Session& s, const httplib::Request&, httplib::Response& res) {
    send_json(res, tree_payload(*s.latest()));
  }));

  server.Get("/api/metrics", with_session([](Session& s, const httplib::Request&, httplib::Response& res) {
    const auto e = s.latest();
    json body = tree_metrics_to_json(e->itree.metrics);
    body["history_index"] = e->index;
    send_json(res, body);
  }));

  server.Get("/api/history", with_session([](Session& s, const httplib::Request&, httplib::Response& res) {
    json entries = json::array();
    for (const auto& e : s.history()) entries.push_back(session_entry_summary(*e));
    send_json(res, {{"entries", std::move(entries)}});
  }));

  server.Get(R"(/api/feature/([^/]+)/viz\.png)",
             with_session([this](Session& s, const httplib::Request& req, httplib::Response& res) {
               const std::string name = req.matches[1];
               const FeatureTable& table = s.table();
               const FeatureId id = parse_feature_name(name, table.layer_name);
               feature_index_of_name(name, table.layer_shape);
               std::optional<Position> pos;
               if (s.options().positioned_objective) pos = Position{id.row, id.col};
               auto viz = s.viz_cache().find(table.layer_name, id.channel, pos);
               if (!viz && options.on_demand_viz && s.has_model()) {
                 VizParams params = s.options().viz;
                 params.position = pos;
                 viz = s.viz_cache().get_or_compute(*s.model(), table.layer_name, id.channel, params);
               }
               if (!viz) {
                 send_error(res, 404, "NotFound", "channel " + std::to_string(id.channel) +
                                                      " has not been visualised");
                 return;
               }
               const fs::path file = s.viz_cache().dir() / VizCache::png_name(table.layer_name, id.channel, pos);
               res.set_content(fs::exists(file) ? read_file(file) : encode_png(to_image8(viz->pixels)),
                               "image/png");
             }));

  server.Get(R"(/api/node/(-?\d+)/examples)",
             with_session([](Session& s, const httplib::Request& req, httplib::Response& res) {
               const auto e = s.latest();
               const long id = std::stol(req.matches[1]);
               if (id < 0 || id >= static_cast<long>(e->itree.nodes.size())) {
                 send_error(res, 404, "NotFound", "no node " + std::to_string(id));
                 return;
               }
               const NodeAnnotation& a = e->itree.nodes[id];
               json examples = json::array();
               for (const ExampleRef& ex : a.examples) {
                 examples.push_back({{"row", ex.row},
                                     {"url", "/images/" + std::to_string(ex.row)},
                                     {"label", ex.label},
                                     {"class", e->itree.tree.class_order.at(ex.label)},
                                     {"split", split_name(ex.split)}});
               }
               send_json(res, {{"node_id", id},
                               {"history_index", e->index},
                               {"n_routed", a.n_routed},
                               {"examples", std::move(examples)}});
             }));

  server.Post("/api/rebuild", with_session([](Session& s, const httplib::Request& req, httplib::Response& res) {
    const json body = req.body.empty() ? json::object() : json::parse(req.body);
    std::vector<std::string> names;
    if (body.contains("excluded")) names = body.at("excluded").get<std::vector<std::string>>();
    std::optional<int> depth;
    if (body.contains("max_depth") && !body.at("max_depth").is_null()) depth = body.at("max_depth").get<int>();
    // Validate before taking the rebuild lock so bad names never queue.
    // Out-of-range names are invalid input here, so they get 400 too.
    for (const std::string& n : names) {
      try {
        feature_index_of_name(n, s.table().layer_shape);
      } catch (const Error& e) {
        send_error(res, 400, error_code_name(e.code()), e.what());
        return;
      }
    }
    const auto e = s.try_rebuild_with_exclusions(names, depth);
    json payload = tree_payload(*e);
    payload["metrics"] = tree_metrics_to_json(e->itree.metrics);
    send_json(res, payload);
  }));

  server.Get(R"(/images/(\d+))", with_session([](Session& s, const httplib::Request& req, httplib::Response& res) {
    const std::size_t row = std::stoul(req.matches[1]);
    const FeatureTable& table = s.table();
    if (row >= table.rows() || !fs::exists(table.paths[row])) {
      send_error(res, 404, "NotFound", "no image for row " + std::to_string(row));
      return;
    }
    res.set_content(read_file(table.paths[row]), image_mime(table.paths[row]));
  }));

  server.Get(R"(/assets/([A-Za-z0-9_.\-]+\.png))",
             with_session([](Session& s, const httplib::Request& req, httplib::Response& res) {
               const fs::path file = s.viz_cache().dir() / std::string(req.matches[1]);
               if (s.viz_cache().dir().empty() || !fs::exists(file)) {
                 send_error(res, 404, "NotFound", "no asset " + std::string(req.matches[1]));
                 return;
               }
               res.set_content(read_file(file), "image/png");
             }));

  if (!options.ui_dir.empty() && fs::is_directory(options.ui_dir)) {
    server.set_mount_point("/", options.ui_dir.string());
  }
}

ExplorerApi::ExplorerApi(ApiOptions options) : impl_(std::make_unique<Impl>()) {
  impl_->options = std::move(options);
  impl_->routes();
}

ExplorerApi::~ExplorerApi() { stop(); }

void ExplorerApi::attach(std::shared_ptr<Session> session) {
  std::atomic_store(&impl_->session, std::move(session));
}

int ExplorerApi::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool ExplorerApi::serve() { return impl_->server.listen_after_bind(); }

void ExplorerApi::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

void ExplorerApi::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace idt
