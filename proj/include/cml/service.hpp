// cml/service.hpp

// Copyright 2026 The CML Annotation Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <regex>
#include <string>

#include <nlohmann/json.hpp>

#include "cml/jobs.hpp"
#include "cml/store.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a macro named _res.
#include <httplib.h>

// HTTP front end. All routes except /health need "Authorization: Bearer <token>",
// where the token belongs to an Annotators document of the addressed database.
//
//   GET    /db/{name}/{collection}                list
//   GET    /db/{name}/{collection}/{id}
//   PUT    /db/{name}/{collection}/{id}
//   POST   /db/{name}/{collection}                create with a generated id
//   DELETE /db/{name}/{collection}/{id}
//   POST   /db/{name}/annotations/{id}/load       body {"in_place": bool}
//   POST   /db/{name}/annotations/{id}/flags      body {"is_finished"?: bool, "is_locked"?: bool}
//   POST   /db/{name}/annotations/{id}/restore    swap in the backup
//   POST   /jobs                                  body {"db", "type", "params"}
//   GET    /jobs/{id}
//   GET    /streams/{id}/data?db={name}           Range requests supported

namespace cml::service {

using Json = nlohmann::json;

inline int HttpStatus(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnauthorized: return 401;
    case ErrorCode::kForbidden: return 403;
    case ErrorCode::kNotFound:
    case ErrorCode::kJobNotFound: return 404;
    case ErrorCode::kMissingReference:
    case ErrorCode::kReferenceInUse: return 409;
    case ErrorCode::kLocked: return 423;
    case ErrorCode::kIoError:
    case ErrorCode::kCacheCorrupt: return 500;
    default: return 400;
  }
}

struct ServiceOptions {
  std::filesystem::path root;  // one subdirectory per database
  std::size_t workers = jobs::JobManager::kDefaultWorkers;
  store::StoreOptions store;
};

class Service {
 public:
  explicit Service(ServiceOptions options) : options_(std::move(options)), jobs_(options_.workers) { Routes(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;
  ~Service() { Stop(); }

  httplib::Server& server() { return server_; }
  jobs::JobManager& job_manager() { return jobs_; }

  // Binds and serves on a background thread. Returns the bound port.
  int Start(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(ErrorCode::kIoError, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  // Serves on the calling thread until Stop().
  void Run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw Error(ErrorCode::kIoError, "cannot listen on " + host + ":" + std::to_string(port));
  }

  void Stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::shared_ptr<store::Database> Open(const std::string& name) {
    static const std::regex kName("[A-Za-z0-9_.-]+");
    if (!std::regex_match(name, kName) || name == "." || name == "..")
      throw Error(ErrorCode::kNotFound, "no database '" + name + "'");
    std::lock_guard lock(mu_);
    if (const auto it = dbs_.find(name); it != dbs_.end()) return it->second;
    const auto dir = options_.root / name;
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::kNotFound, "no database '" + name + "'");
    auto db = std::make_shared<store::Database>(dir, options_.store);
    dbs_[name] = db;
    return db;
  }

 private:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static void Reply(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static std::string BearerToken(const httplib::Request& req) {
    const std::string h = req.get_header_value("Authorization");
    const std::string prefix = "Bearer ";
    if (h.size() <= prefix.size() || h.compare(0, prefix.size(), prefix) != 0)
      throw Error(ErrorCode::kUnauthorized, "missing bearer token");
    return h.substr(prefix.size());
  }

  static Json Body(const httplib::Request& req) {
    if (req.body.empty()) return Json::object();
    try {
      return Json::parse(req.body);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kValidationError, std::string("request body is not JSON: ") + e.what());
    }
  }

  static Handler Guard(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const Error& e) {
        Reply(res, HttpStatus(e.code()), {{"error", ErrorCodeName(e.code())}, {"message", e.what()}});
      } catch (const nlohmann::json::exception& e) {
        Reply(res, 400, {{"error", "ValidationError"}, {"message", e.what()}});
      } catch (const std::exception& e) {
        Reply(res, 500, {{"error", "Internal"}, {"message", e.what()}});
      }
    };
  }

  std::pair<std::shared_ptr<store::Database>, store::Principal> Auth(const httplib::Request& req,
                                                                     const std::string& db_name) {
    auto db = Open(db_name);
    return {db, db->Authenticate(BearerToken(req))};
  }

  static std::optional<bool> OptBool(const Json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_boolean()) throw Error(ErrorCode::kValidationError, std::string(key) + " must be a boolean");
    return j[key].get<bool>();
  }

  void Routes() {
    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) { Reply(res, 200, {{"status", "ok"}}); });

    server_.Get(R"(/db/([^/]+)/([^/]+))", Guard([this](const httplib::Request& req, httplib::Response& res) {
      auto [db, p] = Auth(req, req.matches[1]);
      Reply(res, 200, db->ListAs(p, req.matches[2].str()));
    }));
    server_.Get(R"(/db/([^/]+)/([^/]+)/([^/]+))", Guard([this](const httplib::Request& req, httplib::Response& res) {
      auto [db, p] = Auth(req, req.matches[1]);
      Reply(res, 200, db->GetAs(p, req.matches[2].str(), req.matches[3]));
    }));
    server_.Put(R"(/db/([^/]+)/([^/]+)/([^/]+))", Guard([this](const httplib::Request& req, httplib::Response& res) {
      auto [db, p] = Auth(req, req.matches[1]);
      const std::string c = store::CanonicalCollection(req.matches[2].str());
      const std::string id = req.matches[3];
      if (c == "Annotations") {
        Reply(res, 200, db->AnnotationView(db->WriteAnnotation(p, id, Body(req))));
        return;
      }
      db->PutAs(p, c, id, Body(req));
      Reply(res, 200, db->GetAs(p, c, id));
    }));
    server_.Post(R"(/db/([^/]+)/([^/]+))", Guard([this](const httplib::Request& req, httplib::Response& res) {
      auto [db, p] = Auth(req, req.matches[1]);
      const std::string c = store::CanonicalCollection(req.matches[2].str());
      Json body = Body(req);
      if (c == "Annotations") {
        Reply(res, 201, db->AnnotationView(db->WriteAnnotation(p, {}, body)));
        return;
      }
      const std::string id = body.value("_id", db->NewId());
      if (db->Get(c, id)) throw Error(ErrorCode::kValidationError, c + "/" + id + " already exists");
      db->PutAs(p, c, id, std::move(body));
      Reply(res, 201, db->GetAs(p, c, id));
    }));
    server_.Delete(R"(/db/([^/]+)/([^/]+)/([^/]+))", Guard([this](const httplib::Request& req, httplib::Response& res) {
      auto [db, p] = Auth(req, req.matches[1]);
      db->DeleteAs(p, req.matches[2].str(), req.matches[3]);
      Reply(res, 200, {{"deleted", req.matches[3].str()}});
    }));
    server_.Post(R"(/db/([^/]+)/annotations/([^/]+)/load)",
                 Guard([this](const httplib::Request& req, httplib::Response& res) {
                   auto [db, p] = Auth(req, req.matches[1]);
                   const Json body = Body(req);
                   Reply(res, 200, db->LoadAnnotation(p, req.matches[2], OptBool(body, "in_place").value_or(false)));
                 }));
    server_.Post(R"(/db/([^/]+)/annotations/([^/]+)/flags)",
                 Guard([this](const httplib::Request& req, httplib::Response& res) {
                   auto [db, p] = Auth(req, req.matches[1]);
                   const Json body = Body(req);
                   Reply(res, 200,
                         db->SetFlags(p, req.matches[2], OptBool(body, "is_finished"), OptBool(body, "is_locked")));
                 }));
    server_.Post(R"(/db/([^/]+)/annotations/([^/]+)/restore)",
                 Guard([this](const httplib::Request& req, httplib::Response& res) {
                   auto [db, p] = Auth(req, req.matches[1]);
                   Reply(res, 200, db->RestoreBackup(p, req.matches[2]));
                 }));

    server_.Post("/jobs", Guard([this](const httplib::Request& req, httplib::Response& res) {
      const Json body = Body(req);
      if (!body.contains("db") || !body["db"].is_string())
        throw Error(ErrorCode::kValidationError, "job request needs a 'db'");
      auto [db, p] = Auth(req, body["db"].get<std::string>());
      const std::string id = jobs_.Submit(db, p, body);
      Reply(res, 202, jobs::ToJson(jobs_.Status(id)));
    }));
    server_.Get(R"(/jobs/([^/]+))", Guard([this](const httplib::Request& req, httplib::Response& res) {
      const auto status = jobs_.Status(req.matches[1]);
      Auth(req, status.db);
      Reply(res, 200, jobs::ToJson(status));
    }));

    server_.Get(R"(/streams/([^/]+)/data)", Guard([this](const httplib::Request& req, httplib::Response& res) {
      if (!req.has_param("db")) throw Error(ErrorCode::kValidationError, "missing ?db= parameter");
      auto [db, p] = Auth(req, req.get_param_value("db"));
      const Json stream = db->GetAs(p, "Streams", req.matches[1]);
      const auto path = jobs::StreamPath(*db, stream);
      std::error_code ec;
      const auto size = std::filesystem::file_size(path, ec);
      if (ec) throw Error(ErrorCode::kNotFound, "payload of stream " + req.matches[1].str() + " is missing");
      const std::string type = stream.value("media_type", "") == "audio" ? "audio/wav" : "application/octet-stream";
      auto file = std::make_shared<std::ifstream>(path, std::ios::binary);
      // Status stays unset so httplib answers 206 for Range requests.
      res.set_content_provider(static_cast<std::size_t>(size), type,
                               [file](std::size_t offset, std::size_t length, httplib::DataSink& sink) {
                                 std::vector<char> buf(std::min<std::size_t>(length, 1 << 16));
                                 file->clear();
                                 file->seekg(static_cast<std::streamoff>(offset));
                                 file->read(buf.data(), static_cast<std::streamsize>(buf.size()));
                                 const auto got = file->gcount();
                                 if (got <= 0) return false;
                                 sink.write(buf.data(), static_cast<std::size_t>(got));
                                 return true;
                               });
    }));
  }

  ServiceOptions options_;
  jobs::JobManager jobs_;
  httplib::Server server_;
  std::thread thread_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<store::Database>> dbs_;
};

}  // namespace cml::service
