// cml/jobs.hpp

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

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cml/config.hpp"
#include "cml/engine.hpp"
#include "cml/simulation.hpp"
#include "cml/store.hpp"

namespace cml::jobs {

using Json = nlohmann::json;
using store::Database;
using store::Principal;

// --- store <-> engine glue ----------------------------------------------------

// Streams document of the given media type for a session. A stream without a
// role matches any role; an exact role match wins.
inline std::optional<Json> FindStream(const Database& db, const std::string& session, const std::string& role,
                                      const std::string& media_type) {
  std::optional<Json> any;
  for (const Json& s : db.Find("Streams", [&](const Json& d) {
         return d.value("media_type", "") == media_type && d.value("session", "") == session;
       })) {
    const std::string r = s.value("role", "");
    if (!role.empty() && r == role) return std::optional<Json>(std::in_place, s);
    if ((r.empty() || role.empty()) && !any) any.emplace(s);
  }
  return any;
}

inline std::filesystem::path StreamPath(const Database& db, const Json& stream) {
  return db.files_dir() / stream.at("url").get<std::string>();
}

inline std::shared_ptr<const FeatureStream> LoadFeatures(const Database& db, const std::string& session,
                                                         const std::string& role) {
  const auto doc = FindStream(db, session, role, "feature");
  if (!doc)
    throw Error(ErrorCode::kValidationError, "no feature stream for session " + session +
                                                 (role.empty() ? "" : " role " + role) + "; run extract first");
  return std::make_shared<const FeatureStream>(ReadFeatureStream(StreamPath(db, *doc)));
}

inline SessionBundle LoadBundle(const Database& db, const std::string& annotation_id) {
  SessionBundle b;
  b.annotation = db.ReadAnnotation(annotation_id);
  b.session_id = b.annotation->session_id;
  b.stream = LoadFeatures(db, b.session_id, b.annotation->role);
  return b;
}

inline std::filesystem::path ModelPath(const Database& db, const std::string& model_id) {
  return db.models_dir() / (model_id + ".json");
}

// --- jobs ---------------------------------------------------------------------

enum class JobState { kQueued, kRunning, kDone, kFailed };

inline const char* JobStateName(JobState s) {
  switch (s) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    default: return "failed";
  }
}

struct JobStatus {
  std::string id;
  std::string type;
  std::string db;
  std::string submitter;
  std::string target;  // annotation under write intent, if any
  JobState state = JobState::kQueued;
  double progress = 0.0;
  Json result;
  std::optional<Error> error;
};

inline Json ToJson(const JobStatus& s) {
  Json j = {{"id", s.id},         {"type", s.type},     {"db", s.db},
            {"state", JobStateName(s.state)}, {"progress", s.progress}, {"result", s.result}};
  if (!s.target.empty()) j["target"] = s.target;
  j["error"] = s.error ? Json{{"code", ErrorCodeName(s.error->code())}, {"message", s.error->what()}} : Json(nullptr);
  return j;
}

class JobManager {
 public:
  static constexpr std::size_t kDefaultWorkers = 8;

  explicit JobManager(std::size_t workers = kDefaultWorkers) {
    if (workers == 0) workers = 1;
    for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this] { WorkerLoop(); });
  }

  JobManager(const JobManager&) = delete;
  JobManager& operator=(const JobManager&) = delete;

  // Queued jobs are dropped; running jobs are allowed to finish.
  ~JobManager() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  // request = {"type": ..., "params": {...}}. Parameters are checked before the
  // job is queued; failures surface as ValidationError (or Forbidden/Locked).
  std::string Submit(std::shared_ptr<Database> db, const Principal& principal, const Json& request) {
    if (!request.is_object() || !request.contains("type") || !request["type"].is_string())
      throw Error(ErrorCode::kValidationError, "job request needs a string 'type'");
    const Json params = request.value("params", Json::object());
    if (!params.is_object()) throw Error(ErrorCode::kValidationError, "job params must be an object");
    auto job = std::make_shared<Job>();
    job->status.id = db->NewId();
    job->status.type = request["type"].get<std::string>();
    job->status.db = db->name();
    job->status.submitter = principal.id;
    job->db = db;
    job->run = Prepare(*db, principal, job->status.type, params, *job);
    std::lock_guard lock(mu_);
    jobs_[job->status.id] = job;
    queue_.push_back(job);
    cv_.notify_all();
    return job->status.id;
  }

  JobStatus Status(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorCode::kJobNotFound, "no job " + id);
    JobStatus s = it->second->status;
    s.progress = it->second->progress.load();
    return s;
  }

  // Blocks until the job is done or failed, or the timeout expires.
  JobStatus Wait(const std::string& id, std::chrono::milliseconds timeout = std::chrono::hours(24)) const {
    std::unique_lock lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorCode::kJobNotFound, "no job " + id);
    const auto job = it->second;
    done_cv_.wait_for(lock, timeout, [&] {
      return job->status.state == JobState::kDone || job->status.state == JobState::kFailed;
    });
    JobStatus s = job->status;
    s.progress = job->progress.load();
    return s;
  }

 private:
  struct Job {
    JobStatus status;
    std::shared_ptr<Database> db;
    std::function<Json(Job&)> run;
    std::atomic<double> progress{0.0};
  };
  using Runner = std::function<Json(Job&)>;

  // --- parameter helpers ------------------------------------------------------

  static std::string RequireString(const Json& p, const char* key) {
    if (!p.contains(key) || !p[key].is_string() || p[key].get<std::string>().empty())
      throw Error(ErrorCode::kValidationError, std::string("missing string parameter '") + key + "'");
    return p[key].get<std::string>();
  }

  static std::vector<std::string> RequireStrings(const Json& p, const char* key) {
    std::vector<std::string> out;
    if (p.contains(key) && p[key].is_array())
      for (const auto& v : p[key])
        if (v.is_string()) out.push_back(v.get<std::string>());
    if (out.empty() || out.size() != p[key].size())
      throw Error(ErrorCode::kValidationError, std::string("parameter '") + key + "' must be a non-empty string list");
    return out;
  }

  static void RequireAnnotations(const Database& db, const std::vector<std::string>& ids) {
    for (const auto& id : ids)
      if (!db.Get("Annotations", id)) throw Error(ErrorCode::kValidationError, "unknown annotation " + id);
  }

  static void RequireModel(const Database& db, const std::string& id) {
    if (!std::filesystem::exists(ModelPath(db, id))) throw Error(ErrorCode::kValidationError, "unknown model " + id);
  }

  static ToolConfig ConfigFrom(const Json& p) {
    ToolConfig cfg;
    Json sections = Json::object();
    for (const char* key : {"features", "learner", "completion"})
      if (p.contains(key)) sections[key] = p[key];
    cfg.Apply(sections);
    cfg.features.Validate();
    cfg.completion.Validate();
    return cfg;
  }

  static Principal MachineOf(const Database& db) {
    try {
      return db.PrincipalOf(kMachineAnnotator);
    } catch (const Error&) {
      throw Error(ErrorCode::kValidationError, "database has no machine annotator");
    }
  }

  // --- job types ------------------------------------------------------------------

  Runner Prepare(Database& db, const Principal& p, const std::string& type, const Json& params, Job& job) {
    const ToolConfig cfg = ConfigFrom(params);
    if (type == "extract") return PrepareExtract(db, params, cfg);
    if (type == "train") {
      const auto ids = RequireStrings(params, "annotations");
      RequireAnnotations(db, ids);
      return [ids, cfg](Job& j) {
        std::vector<SessionBundle> bundles;
        for (std::size_t i = 0; i < ids.size(); ++i) bundles.push_back(LoadBundle(*j.db, ids[i]));
        j.progress = 0.5;
        const LinearModel model = TrainPoolModel(bundles, cfg.learner);
        std::filesystem::create_directories(j.db->models_dir());
        SaveModel(ModelPath(*j.db, j.status.id), model);
        return Json{{"model", j.status.id}, {"class_ids", model.class_ids}, {"dim", model.dim()}};
      };
    }
    if (type == "complete") {
      const std::string id = RequireString(params, "annotation");
      const auto h = db.Get("Annotations", id);
      if (!h) throw Error(ErrorCode::kValidationError, "unknown annotation " + id);
      if (!p.admin() && h->value("annotator", "") != p.id)
        throw Error(ErrorCode::kForbidden, p.id + " cannot complete another user's annotation");
      if (!p.admin() && h->value("is_locked", false)) throw Error(ErrorCode::kLocked, "annotation " + id + " is locked");
      job.status.target = id;
      return [id, p, cfg](Job& j) {
        SessionBundle b = LoadBundle(*j.db, id);
        const std::size_t before = b.annotation->segments.size();
        j.progress = 0.2;
        const DiscreteAnnotation done = CompleteSession(b, cfg.completion);
        j.db->WriteAnnotation(p, id, Json{{"segments", SegmentsToJson(done.segments)}}, j.status.id);
        return Json{{"annotation", id}, {"segments_added", done.segments.size() - before}};
      };
    }
    if (type == "transfer") {
      const std::string model_id = RequireString(params, "model");
      const std::string session = RequireString(params, "session");
      const std::string role = RequireString(params, "role");
      const std::string scheme = RequireString(params, "scheme");
      RequireModel(db, model_id);
      if (!db.Get("Sessions", session)) throw Error(ErrorCode::kValidationError, "unknown session " + session);
      if (!db.Get("Roles", role)) throw Error(ErrorCode::kValidationError, "unknown role " + role);
      if (!db.Get("Schemes", scheme)) throw Error(ErrorCode::kValidationError, "unknown scheme " + scheme);
      const Principal machine = MachineOf(db);
      // Re-running a transfer overwrites the machine's earlier tier (its backup keeps the previous one).
      std::string target = db.NewId();
      for (const Json& a : db.Find("Annotations", [&](const Json& d) {
             return d.value("annotator", "") == machine.id && d.value("session", "") == session &&
                    d.value("role", "") == role && d.value("scheme", "") == scheme;
           }))
        target = a.at("_id").get<std::string>();
      job.status.target = target;
      return [=](Job& j) {
        SessionBundle b;
        b.session_id = session;
        b.stream = LoadFeatures(*j.db, session, role);
        const LinearModel model = LoadModel(ModelPath(*j.db, model_id));
        CompletionConfig cc = cfg.completion;
        cc.machine_annotator = machine.id;
        const DiscreteAnnotation out = TransferSession(model, b, j.db->ReadScheme(scheme), cc);
        j.db->WriteAnnotation(machine, target,
                              Json{{"scheme", scheme},
                                   {"session", session},
                                   {"role", role},
                                   {"annotator", machine.id},
                                   {"segments", SegmentsToJson(out.segments)}},
                              j.status.id);
        return Json{{"annotation", target}, {"segments", out.segments.size()}};
      };
    }
    if (type == "evaluate") {
      const std::string model_id = RequireString(params, "model");
      const auto ids = RequireStrings(params, "annotations");
      RequireModel(db, model_id);
      RequireAnnotations(db, ids);
      return [model_id, ids](Job& j) {
        std::vector<SessionBundle> bundles;
        for (const auto& id : ids) bundles.push_back(LoadBundle(*j.db, id));
        return ToJson(EvaluateModel(LoadModel(ModelPath(*j.db, model_id)), bundles));
      };
    }
    if (type == "simulate") {
      const auto train = RequireStrings(params, "train");
      const auto test = RequireStrings(params, "test");
      RequireAnnotations(db, train);
      RequireAnnotations(db, test);
      SimulationConfig sc;
      sc.learner = cfg.learner;
      if (params.contains("seed")) sc.learner.seed = params["seed"].get<std::uint64_t>();
      try {
        sc.labeled_counts = params.value("n", std::vector<int>{});
        sc.thresholds = params.value("t", std::vector<double>{0.5, 0.75});
        sc.jobs = params.value("jobs", 1);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kValidationError, std::string("bad simulate parameters: ") + e.what());
      }
      if (sc.labeled_counts.empty())
        for (int n = 1; n <= static_cast<int>(train.size()); ++n) sc.labeled_counts.push_back(n);
      for (int n : sc.labeled_counts)
        if (n < 1 || n > static_cast<int>(train.size()))
          throw Error(ErrorCode::kValidationError, "n=" + std::to_string(n) + " outside the training pool");
      for (double t : sc.thresholds)
        if (!(t >= 0.0 && t <= 1.0)) throw Error(ErrorCode::kValidationError, "thresholds must lie in [0,1]");
      return [train, test, sc](Job& j) {
        std::vector<SessionBundle> tr, te;
        for (const auto& id : train) tr.push_back(LoadBundle(*j.db, id));
        for (const auto& id : test) te.push_back(LoadBundle(*j.db, id));
        const auto report =
            RunSimulation(tr, te, sc, [&j](int done, int total) { j.progress = static_cast<double>(done) / total; });
        return ToJson(report);
      };
    }
    throw Error(ErrorCode::kValidationError, "unknown job type '" + type + "'");
  }

  // Features for every audio stream of the listed sessions, published as
  // Streams documents of media type "feature".
  Runner PrepareExtract(Database& db, const Json& params, const ToolConfig& cfg) {
    std::vector<std::string> sessions;
    if (params.contains("session")) sessions.push_back(RequireString(params, "session"));
    else sessions = RequireStrings(params, "sessions");
    const std::string role = params.value("role", "");
    std::vector<Json> audio;
    for (const auto& s : sessions) {
      if (!db.Get("Sessions", s)) throw Error(ErrorCode::kValidationError, "unknown session " + s);
      const auto streams = db.Find("Streams", [&](const Json& d) {
        return d.value("media_type", "") == "audio" && d.value("session", "") == s &&
               (role.empty() || d.value("role", "") == role);
      });
      if (streams.empty()) throw Error(ErrorCode::kValidationError, "session " + s + " has no audio stream");
      audio.insert(audio.end(), streams.begin(), streams.end());
    }
    const Principal machine = MachineOf(db);
    return [audio, cfg, machine](Job& j) {
      Json out = Json::array();
      for (std::size_t i = 0; i < audio.size(); ++i) {
        const Json& a = audio[i];
        const std::string audio_id = a.at("_id").get<std::string>();
        bool hit = false;
        const FeatureStream fs = ExtractSessionFeatures(StreamPath(*j.db, a), cfg.features, j.db->dir() / "cache", &hit);
        const std::string url = "features/" + audio_id + ".cmlf";
        std::filesystem::create_directories(j.db->files_dir() / "features");
        WriteFeatureStream(j.db->files_dir() / url, fs);
        Json doc = {{"name", a.value("name", audio_id) + " mfcc"},
                    {"media_type", "feature"},
                    {"session", a.at("session")},
                    {"url", url},
                    {"source", audio_id},
                    {"config", ToJson(cfg.features)},
                    {"dim", fs.dim()},
                    {"frame_step_s", fs.frame_step_s}};
        for (const char* key : {"role", "subject"})
          if (a.contains(key)) doc[key] = a[key];
        const std::string id = audio_id + ".feature";
        j.db->PutAs(machine, "Streams", id, doc);
        out.push_back({{"stream", id}, {"frames", fs.rows()}, {"dim", fs.dim()}, {"cache_hit", hit}});
        j.progress = static_cast<double>(i + 1) / audio.size();
      }
      return Json{{"streams", out}};
    };
  }

  // --- scheduling -------------------------------------------------------------------

  // First queued job whose target annotation is free; acquires its intent.
  std::shared_ptr<Job> NextRunnableLocked() {
    for (auto it = queue_.begin(); it != queue_.end(); ++it) {
      const auto& job = *it;
      if (!job->status.target.empty() && !job->db->TryAcquireIntent(job->status.target, job->status.id)) continue;
      auto picked = job;
      queue_.erase(it);
      return picked;
    }
    return nullptr;
  }

  void WorkerLoop() {
    std::unique_lock lock(mu_);
    for (;;) {
      std::shared_ptr<Job> job;
      // Intents can also be released outside this manager, so blocked jobs are
      // re-checked periodically rather than only on notification.
      while (!cv_.wait_for(lock, std::chrono::milliseconds(100),
                           [&] { return stop_ || (job = NextRunnableLocked()) != nullptr; })) {
      }
      if (stop_) {
        if (job && !job->status.target.empty()) job->db->ReleaseIntent(job->status.target, job->status.id);
        return;
      }
      job->status.state = JobState::kRunning;
      lock.unlock();
      Json result;
      std::optional<Error> error;
      try {
        result = job->run(*job);
      } catch (const Error& e) {
        error = e;
      } catch (const std::exception& e) {
        error = Error(ErrorCode::kIoError, e.what());
      }
      if (!job->status.target.empty()) job->db->ReleaseIntent(job->status.target, job->status.id);
      lock.lock();
      job->status.result = std::move(result);
      job->status.error = std::move(error);
      job->status.state = job->status.error ? JobState::kFailed : JobState::kDone;
      if (!job->status.error) job->progress = 1.0;
      job->run = nullptr;
      done_cv_.notify_all();
      cv_.notify_all();
    }
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  mutable std::condition_variable done_cv_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::shared_ptr<Job>> queue_;
  std::vector<std::thread> threads_;
  bool stop_ = false;
};

}  // namespace cml::jobs
