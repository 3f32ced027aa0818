#pragma once

#include <functional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "nprompt/engine.hpp"

namespace nprompt {

// HTTP front end over an Engine.
//
//   POST /optimize      {prompt, selections?, seed?, decode_params?}
//   POST /compare       {record_id}
//   GET  /keywords      taxonomy by category (ETag, 304 on If-None-Match)
//   GET  /records/<id>  stored record
//   GET  /health
//
// Errors are {"error": kind, "message": text} with 400 for invalid input,
// 404 for unknown records, 422 for unsatisfiable constraints and 502 when an
// image or scoring backend fails.
class HttpService {
 public:
  explicit HttpService(Engine& engine) : engine_(engine) {
    keywords_body_ = engine_.keywords_json().dump();
    keywords_etag_ = "\"" + hex(fnv1a(keywords_body_)) + "\"";
    routes();
  }

  httplib::Server& server() noexcept { return server_; }

  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  int bind_to_any_port(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

  const std::string& keywords_etag() const noexcept { return keywords_etag_; }

 private:
  static std::string hex(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
  }

  static void send(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void fail(httplib::Response& res, int status, std::string_view kind, std::string_view message) {
    send(res, status, {{"error", kind}, {"message", message}});
  }

  void guarded(httplib::Response& res, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const ValidationError& e) {
      fail(res, 400, "invalid_request", e.what());
    } catch (const json::exception& e) {
      fail(res, 400, "invalid_request", e.what());
    } catch (const NotFoundError& e) {
      fail(res, 404, "not_found", e.what());
    } catch (const UnsatisfiableError& e) {
      fail(res, 422, "unsatisfiable", e.what());
    } catch (const TransportError& e) {
      fail(res, 502, "backend_unavailable", e.what());
    } catch (const ScorerError& e) {
      fail(res, 502, "scorer_failed", e.what());
    } catch (const std::exception& e) {
      fail(res, 500, "internal", e.what());
    }
  }

  static json parse_body(const httplib::Request& req) {
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded()) throw ValidationError("request body is not valid JSON");
    return body;
  }

  void routes() {
    const std::string origin = engine_.config().cors_origin;
    server_.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                 {"Access-Control-Allow-Headers", "Content-Type, If-None-Match"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                 {"Access-Control-Expose-Headers", "ETag"}});
    server_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Post("/optimize", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        const auto request = optimize_request_from_json(body, engine_.config().decode);
        send(res, 200, engine_.optimize_json(engine_.optimize(request)));
      });
    });

    server_.Post("/compare", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        if (!body.is_object() || !body.contains("record_id") || !body["record_id"].is_string())
          throw ValidationError("'record_id' must be a string");
        const auto rec = engine_.compare(body["record_id"].get<std::string>());
        send(res, 200, engine_.compare_json(rec));
      });
    });

    server_.Get("/keywords", [this](const httplib::Request& req, httplib::Response& res) {
      res.set_header("ETag", keywords_etag_);
      res.set_header("Cache-Control", "no-cache");
      if (req.get_header_value("If-None-Match") == keywords_etag_) {
        res.status = 304;
        return;
      }
      res.status = 200;
      res.set_content(keywords_body_, "application/json");
    });

    server_.Get(R"(/records/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        auto rec = engine_.records().get(id);
        if (!rec) throw NotFoundError("unknown record '" + id + "'");
        send(res, 200, to_json(*rec));
      });
    });

    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      send(res, 200, {{"status", "ok"}, {"mode", std::string(to_string(engine_.config().mode))},
                      {"records", engine_.records().size()}});
    });
  }

  Engine& engine_;
  httplib::Server server_;
  std::string keywords_body_;
  std::string keywords_etag_;
};

}  // namespace nprompt
