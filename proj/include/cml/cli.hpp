// cml/cli.hpp

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
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cml/config.hpp"
#include "cml/engine.hpp"
#include "cml/simulation.hpp"
#include "cml/store.hpp"
#include "cml/synthetic.hpp"
#include "cml/service.hpp"

#include <CLI11.hpp>

// Command-line front end. Sessions are named either through a corpus manifest
//
//   {"sessions": [{"id": "s01", "features": "s01.cmlf", "annotation": "s01.json"}, ...],
//    "train": ["s01", ...], "test": ["s07", ...]}
//
// (paths relative to the manifest) plus --sessions s01,s02, or directly as
// --sessions feat.cmlf:annot.json,... Config precedence: built-in defaults, then
// the --config file, then individual flags.

namespace cml::cli {

namespace fs = std::filesystem;
using Json = nlohmann::json;

struct SessionRef {
  std::string id;
  fs::path features;
  fs::path annotation;  // empty when unannotated
};

struct Manifest {
  std::vector<SessionRef> sessions;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

inline std::vector<std::string> SplitList(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

// "1..12", "1,2,5" or a mix.
inline std::vector<int> ParseCounts(const std::string& s) {
  std::vector<int> out;
  try {
    for (const auto& item : SplitList(s)) {
      const auto dots = item.find("..");
      if (dots == std::string::npos) {
        out.push_back(std::stoi(item));
        continue;
      }
      const int lo = std::stoi(item.substr(0, dots)), hi = std::stoi(item.substr(dots + 2));
      if (hi < lo) throw std::invalid_argument(item);
      for (int n = lo; n <= hi; ++n) out.push_back(n);
    }
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kValidationError, "cannot parse count list '" + s + "'");
  }
  return out;
}

inline std::vector<double> ParseDoubles(const std::string& s) {
  std::vector<double> out;
  try {
    for (const auto& item : SplitList(s)) out.push_back(std::stod(item));
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kValidationError, "cannot parse number list '" + s + "'");
  }
  return out;
}

inline Json ReadJsonFile(const fs::path& path) {
  const auto bytes = detail::ReadFileBytes(path);
  try {
    return Json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kValidationError, path.string() + " is not JSON: " + e.what());
  }
}

inline void WriteTextFile(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::WriteFileAtomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline Manifest LoadManifest(const fs::path& path) {
  const Json j = ReadJsonFile(path);
  const fs::path base = path.parent_path();
  Manifest m;
  try {
    for (const auto& s : j.at("sessions")) {
      SessionRef r;
      r.id = s.at("id").get<std::string>();
      r.features = base / s.at("features").get<std::string>();
      if (s.contains("annotation")) r.annotation = base / s["annotation"].get<std::string>();
      m.sessions.push_back(std::move(r));
    }
    m.train = j.value("train", std::vector<std::string>{});
    m.test = j.value("test", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kValidationError, "bad manifest " + path.string() + ": " + e.what());
  }
  return m;
}

inline std::vector<SessionRef> ResolveSessions(const std::optional<Manifest>& manifest,
                                               const std::vector<std::string>& items) {
  std::vector<SessionRef> out;
  if (manifest) {
    if (items.empty()) return manifest->sessions;
    for (const auto& id : items) {
      const auto it = std::find_if(manifest->sessions.begin(), manifest->sessions.end(),
                                   [&](const SessionRef& r) { return r.id == id; });
      if (it == manifest->sessions.end()) throw Error(ErrorCode::kValidationError, "session '" + id + "' is not in the manifest");
      out.push_back(*it);
    }
    return out;
  }
  for (const auto& item : items) {
    SessionRef r;
    const auto colon = item.find(':');
    r.features = item.substr(0, colon);
    if (colon != std::string::npos) r.annotation = item.substr(colon + 1);
    r.id = r.features.stem().string();
    out.push_back(std::move(r));
  }
  if (out.empty()) throw Error(ErrorCode::kValidationError, "no sessions given");
  return out;
}

inline SessionBundle LoadSession(const SessionRef& r) {
  SessionBundle b;
  b.session_id = r.id;
  b.stream = std::make_shared<const FeatureStream>(ReadFeatureStream(r.features));
  if (!r.annotation.empty()) b.annotation = LoadAnnotation(r.annotation);
  return b;
}

inline std::vector<SessionBundle> LoadSessions(const std::vector<SessionRef>& refs) {
  std::vector<SessionBundle> out;
  for (const auto& r : refs) out.push_back(LoadSession(r));
  return out;
}

// Confusion matrix, per-class recall, UA and UAAUC as text.
inline std::string FormatEvaluation(const EvaluationResult& r, const std::optional<Scheme>& scheme) {
  auto label = [&](int id) { return scheme ? scheme->LabelOf(id) : std::to_string(id); };
  const auto& cm = r.recall.confusion;
  std::size_t width = 8;
  for (int id : cm.class_ids) width = std::max(width, label(id).size() + 2);
  std::ostringstream os;
  os << "confusion (rows: truth, columns: prediction)\n" << std::setw(static_cast<int>(width)) << "";
  for (int id : cm.class_ids) os << std::setw(static_cast<int>(width)) << label(id);
  os << '\n';
  for (std::size_t i = 0; i < cm.class_ids.size(); ++i) {
    os << std::setw(static_cast<int>(width)) << label(cm.class_ids[i]);
    for (std::size_t j = 0; j < cm.class_ids.size(); ++j)
      os << std::setw(static_cast<int>(width)) << cm.counts[i][j];
    os << '\n';
  }
  os << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < cm.class_ids.size(); ++i) {
    os << "recall " << label(cm.class_ids[i]) << ' ';
    if (r.recall.recall[i]) os << *r.recall.recall[i] << '\n';
    else os << "-\n";
  }
  os << "UA " << r.recall.unweighted_average << '\n';
  if (r.auc) os << "UAAUC " << r.auc->unweighted_average << '\n';
  else os << "UAAUC -\n";
  return os.str();
}

// --- command bodies -------------------------------------------------------------

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline int Extract(const std::vector<std::string>& inputs, const FeatureConfig& config, const fs::path& cache,
                   const fs::path& out_dir, int jobs, bool json, Streams io) {
  config.Validate();
  if (inputs.empty()) throw Error(ErrorCode::kValidationError, "no input files");
  std::vector<Json> results(inputs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < inputs.size(); i = next++) {
      try {
        const fs::path in = inputs[i];
        bool hit = false;
        const FeatureStream s = ExtractSessionFeatures(in, config, cache, &hit);
        const fs::path out = out_dir / (in.stem().string() + ".cmlf");
        fs::create_directories(out_dir);
        WriteFeatureStream(out, s);
        results[i] = {{"input", in.string()}, {"output", out.string()}, {"frames", s.rows()}, {"dim", s.dim()},
                      {"cache_hit", hit}};
        std::lock_guard lock(mu);
        io.err << "extract " << in.string() << " -> " << out.string() << (hit ? " (cached)" : "") << '\n';
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const int n = std::clamp<int>(jobs, 1, static_cast<int>(inputs.size()));
  std::vector<std::thread> pool;
  for (int j = 1; j < n; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  if (json) io.out << Json(results).dump(2) << '\n';
  return 0;
}

inline int Simulate(const std::vector<SessionBundle>& train, const std::vector<SessionBundle>& test,
                    const SimulationConfig& config, bool json, const fs::path& out_file, Streams io) {
  const auto report = RunSimulation(train, test, config, [&](int done, int total) {
    io.err << "simulate: " << done << "/" << total << " cells\n";
  });
  const Json j = ToJson(report);
  if (!out_file.empty()) WriteTextFile(out_file, j.dump(2) + "\n");
  if (json) io.out << j.dump(2) << '\n';
  else io.out << FormatReportTable(report);
  return 0;
}

// --- entry point ------------------------------------------------------------------

// Exit codes: 0 success, 1 operational error, 2 usage error.
inline int Run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Cooperative machine-learning annotation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");
  Streams io{out, err};

  std::string config_path = "default";
  bool json = false;
  std::uint64_t seed = kDefaultSeed;
  int jobs = 1;
  std::string corpus;
  std::string sessions_arg;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file, or 'default'");
  };
  auto add_sessions = [&](CLI::App* sub) {
    sub->add_option("--corpus", corpus, "Corpus manifest (JSON)");
    sub->add_option("--sessions", sessions_arg, "Comma list of manifest ids or features:annotation pairs");
  };
  auto add_seed = [&](CLI::App* sub) {
    return sub->add_option("--seed", seed, "Seed for all stochastic steps (default 20170101)");
  };

  // extract
  auto* ex = app.add_subcommand("extract", "Compute feature streams for audio files");
  std::vector<std::string> ex_inputs;
  std::string ex_cache = ".cml-cache", ex_out = ".";
  int ex_context = -1;
  add_config(ex);
  ex->add_option("inputs", ex_inputs, "WAV files")->required();
  ex->add_option("--jobs", jobs, "Parallel sessions")->check(CLI::PositiveNumber);
  ex->add_option("--cache", ex_cache, "Feature cache directory");
  ex->add_option("--out-dir", ex_out, "Where to write <stem>.cmlf");
  auto* ex_context_opt = ex->add_option("--context", ex_context, "Context frames on each side")->check(CLI::NonNegativeNumber);
  ex->add_flag("--json", json, "Machine-readable output");

  // train
  auto* tr = app.add_subcommand("train", "Train a pool model on finished annotations");
  std::string tr_out;
  add_config(tr);
  add_sessions(tr);
  auto* tr_seed = add_seed(tr);
  tr->add_option("--out", tr_out, "Model file")->required();

  // complete
  auto* co = app.add_subcommand("complete", "Session completion on one annotation");
  std::string co_features, co_annotation, co_out, co_session;
  double co_threshold = 0, co_min_dur = 0, co_max_gap = 0;
  add_config(co);
  co->add_option("--corpus", corpus, "Corpus manifest (JSON)");
  co->add_option("--session", co_session, "Manifest session id");
  co->add_option("--features", co_features, "Feature stream (.cmlf)");
  co->add_option("--annotation", co_annotation, "Partial annotation (JSON)");
  co->add_option("--out", co_out, "Completed annotation (JSON)")->required();
  auto* co_seed = add_seed(co);
  auto* co_threshold_opt = co->add_option("--threshold", co_threshold, "Confidence threshold for flagging");
  auto* co_min_dur_opt = co->add_option("--min-duration", co_min_dur, "Drop predicted segments shorter than this (s)");
  auto* co_max_gap_opt = co->add_option("--max-gap", co_max_gap, "Merge same-label segments across gaps up to this (s)");

  // transfer
  auto* tf = app.add_subcommand("transfer", "Apply a model to whole sessions");
  std::string tf_model, tf_out = ".", tf_scheme;
  add_config(tf);
  add_sessions(tf);
  tf->add_option("--model", tf_model, "Model file")->required();
  tf->add_option("--scheme", tf_scheme, "Scheme JSON, needed when sessions carry no annotation");
  tf->add_option("--out-dir", tf_out, "Where to write <session>.machine.json");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Confusion matrix, UA and UAAUC of a model");
  std::string ev_model;
  add_sessions(ev);
  ev->add_option("--model", ev_model, "Model file")->required();
  ev->add_flag("--json", json, "Machine-readable output");

  // simulate
  auto* si = app.add_subcommand("simulate", "Run the n x t simulation grid");
  std::string si_n = "1..12", si_t = "0.5,0.75", si_train, si_test, si_out;
  bool si_synthetic = false;
  int si_train_count = 12, si_test_count = 6;
  double si_duration = 120.0;
  add_config(si);
  si->add_option("--corpus", corpus, "Corpus manifest with train/test lists");
  si->add_option("--train", si_train, "Comma list of training session ids (in order)");
  si->add_option("--test", si_test, "Comma list of test session ids");
  si->add_option("--n", si_n, "Labelled session counts, e.g. 1..12");
  si->add_option("--t", si_t, "Confidence thresholds, e.g. 0.5,0.75");
  auto* si_seed = add_seed(si);
  si->add_option("--jobs", jobs, "Parallel grid cells")->check(CLI::PositiveNumber);
  si->add_flag("--synthetic", si_synthetic, "Use a generated corpus (the default without --corpus)");
  si->add_option("--train-count", si_train_count, "Synthetic training sessions")->check(CLI::PositiveNumber);
  si->add_option("--test-count", si_test_count, "Synthetic test sessions")->check(CLI::PositiveNumber);
  si->add_option("--duration", si_duration, "Synthetic session length (s)")->check(CLI::PositiveNumber);
  si->add_option("--out", si_out, "Also write the JSON report here");
  si->add_flag("--json", json, "Machine-readable output");

  // db
  auto* db = app.add_subcommand("db", "Manage an annotation database");
  db->require_subcommand(1);
  db->fallthrough();
  std::string db_root = ".", db_name, db_admin = "admin", db_admin_token, db_machine_token, db_file, db_out;
  db->add_option("--root", db_root, "Directory holding databases");
  db->add_option("--name", db_name, "Database name")->required();
  auto* db_init = db->add_subcommand("init", "Create a database with an admin and a machine annotator");
  db_init->add_option("--admin", db_admin, "Admin annotator name");
  db_init->add_option("--admin-token", db_admin_token, "Admin token (random when omitted)");
  db_init->add_option("--machine-token", db_machine_token, "Machine token (random when omitted)");
  auto* db_import = db->add_subcommand("import", "Import an export document");
  db_import->add_option("file", db_file, "JSON file")->required();
  auto* db_export = db->add_subcommand("export", "Dump all collections as JSON");
  db_export->add_option("--out", db_out, "Output file (stdout when omitted)");
  auto* db_audit = db->add_subcommand("audit", "Check referential integrity");
  auto* db_compact = db->add_subcommand("compact", "Snapshot and truncate the journal");

  // serve
  auto* sv = app.add_subcommand("serve", "Start the HTTP service");
  std::string sv_host = "127.0.0.1";
  int sv_port = 8080;
  std::size_t sv_workers = jobs::JobManager::kDefaultWorkers;
  sv->add_option("--root", db_root, "Directory holding databases");
  sv->add_option("--host", sv_host, "Bind address");
  sv->add_option("--port", sv_port, "Port");
  sv->add_option("--workers", sv_workers, "Background job workers")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    ToolConfig cfg = LoadToolConfig(config_path);
    auto seeded = [&](CLI::Option* opt) {
      if (opt && opt->count() > 0) cfg.learner.seed = seed;
      cfg.completion.learner = cfg.learner;
    };
    std::optional<Manifest> manifest;
    if (!corpus.empty()) manifest = LoadManifest(corpus);

    if (*ex) {
      if (ex_context_opt->count() > 0) cfg.features.context_n = ex_context;
      return Extract(ex_inputs, cfg.features, ex_cache, ex_out, jobs, json, io);
    }
    if (*tr) {
      seeded(tr_seed);
      const auto bundles = LoadSessions(ResolveSessions(manifest, SplitList(sessions_arg)));
      const LinearModel model = TrainPoolModel(bundles, cfg.learner);
      SaveModel(tr_out, model);
      err << "train: " << bundles.size() << " sessions, " << model.num_classes() << " classes, dim " << model.dim()
          << " -> " << tr_out << '\n';
      return 0;
    }
    if (*co) {
      seeded(co_seed);
      if (co_threshold_opt->count() > 0) cfg.completion.confidence_threshold = co_threshold;
      if (co_min_dur_opt->count() > 0) cfg.completion.min_duration_s = co_min_dur;
      if (co_max_gap_opt->count() > 0) cfg.completion.max_gap_s = co_max_gap;
      SessionRef ref;
      if (!co_session.empty()) {
        ref = ResolveSessions(manifest, {co_session}).front();
      } else {
        if (co_features.empty() || co_annotation.empty())
          throw Error(ErrorCode::kValidationError, "complete needs --session or --features and --annotation");
        ref = {fs::path(co_features).stem().string(), co_features, co_annotation};
      }
      if (ref.annotation.empty()) throw Error(ErrorCode::kValidationError, "session " + ref.id + " has no annotation");
      const SessionBundle b = LoadSession(ref);
      const DiscreteAnnotation result = CompleteSession(b, cfg.completion);
      SaveAnnotation(co_out, result);
      err << "complete: " << b.annotation->segments.size() << " manual + "
          << result.segments.size() - b.annotation->segments.size() << " predicted segments, "
          << FlaggedSegments(result, cfg.completion.confidence_threshold).size() << " below threshold -> " << co_out
          << '\n';
      return 0;
    }
    if (*tf) {
      const LinearModel model = LoadModel(tf_model);
      std::optional<Scheme> scheme;
      if (!tf_scheme.empty()) scheme = SchemeFromJson(ReadJsonFile(tf_scheme));
      for (const auto& ref : ResolveSessions(manifest, SplitList(sessions_arg))) {
        const SessionBundle b = LoadSession(ref);
        const Scheme& s = scheme ? *scheme
                          : b.annotation ? b.annotation->scheme
                                         : throw Error(ErrorCode::kValidationError, "session " + ref.id + " needs --scheme");
        DiscreteAnnotation a = TransferSession(model, b, s, cfg.completion);
        const fs::path path = fs::path(tf_out) / (ref.id + ".machine.json");
        fs::create_directories(tf_out);
        SaveAnnotation(path, a);
        err << "transfer: " << ref.id << " -> " << path.string() << '\n';
      }
      return 0;
    }
    if (*ev) {
      const auto bundles = LoadSessions(ResolveSessions(manifest, SplitList(sessions_arg)));
      const EvaluationResult r = EvaluateModel(LoadModel(ev_model), bundles);
      if (json) out << ToJson(r).dump(2) << '\n';
      else out << FormatEvaluation(r, bundles.front().annotation->scheme);
      return 0;
    }
    if (*si) {
      seeded(si_seed);
      SimulationConfig sc;
      sc.labeled_counts = ParseCounts(si_n);
      sc.thresholds = ParseDoubles(si_t);
      sc.learner = cfg.learner;
      sc.jobs = jobs;
      if (si_synthetic || !manifest) {
        err << "simulate: generating " << si_train_count << "+" << si_test_count << " synthetic sessions\n";
        synthetic::SessionOptions opt;
        opt.duration_s = si_duration;
        const auto c = synthetic::GenerateCorpus(cfg.learner.seed, si_train_count, si_test_count, cfg.features, opt);
        return Simulate(c.train, c.test, sc, json, si_out, io);
      }
      const auto train_ids = si_train.empty() ? manifest->train : SplitList(si_train);
      const auto test_ids = si_test.empty() ? manifest->test : SplitList(si_test);
      if (train_ids.empty() || test_ids.empty())
        throw Error(ErrorCode::kValidationError, "simulate needs train and test session lists");
      return Simulate(LoadSessions(ResolveSessions(manifest, train_ids)),
                      LoadSessions(ResolveSessions(manifest, test_ids)), sc, json, si_out, io);
    }
    if (*db) {
      const fs::path dir = fs::path(db_root) / db_name;
      if (!*db_init && !fs::is_directory(dir)) throw Error(ErrorCode::kNotFound, "no database at " + dir.string());
      store::Database d(dir);
      if (*db_init) {
        const auto [admin, machine] = d.Initialize(db_admin, db_admin_token, db_machine_token);
        out << Json{{"database", d.name()}, {"admin", db_admin}, {"admin_token", admin}, {"machine_token", machine}}.dump(2)
            << '\n';
      } else if (*db_import) {
        d.Import(ReadJsonFile(db_file));
        err << "import: " << db_file << " -> " << dir.string() << '\n';
      } else if (*db_export) {
        const std::string text = d.Export().dump(2) + "\n";
        if (db_out.empty()) out << text;
        else WriteTextFile(db_out, text);
      } else if (*db_audit) {
        const auto problems = d.Audit();
        for (const auto& p : problems) out << p << '\n';
        if (!problems.empty()) {
          err << "audit: " << problems.size() << " problem(s)\n";
          return 1;
        }
        err << "audit: ok\n";
      } else if (*db_compact) {
        d.Compact();
      }
      return 0;
    }
    if (*sv) {
      service::Service s({db_root, sv_workers, {}});
      err << "serving " << db_root << " on http://" << sv_host << ":" << sv_port << '\n';
      s.Run(sv_host, sv_port);
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << ErrorCodeName(e.code()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace cml::cli
