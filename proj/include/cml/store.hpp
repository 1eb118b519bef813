// cml/store.hpp

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

#include <fcntl.h>
#include <openssl/rand.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cml/annotation.hpp"
#include "cml/audio.hpp"
#include "cml/error.hpp"

// Embedded document store. Each database is a directory holding
//
//   snapshot.json   {"seq": S, "collections": {name: {id: doc}}}
//   journal.log     one record per line: "<crc32 hex> <json>\n", json = {"seq", "ops": [...]}
//   files/          stream payloads, addressed by Streams.url (relative)
//   models/         trained models written by jobs
//
// A record is the unit of atomicity: all its ops are applied or none. Replay
// stops at the first torn or corrupt line and truncates the journal there.

namespace cml::store {

using Json = nlohmann::json;

inline constexpr std::array<const char*, 8> kCollections = {
    "Meta", "Sessions", "Annotators", "Roles", "Streams", "Schemes", "Annotations", "AnnotationData"};

// Accepts the canonical names and any case variant, plus "annotation_data".
inline std::string CanonicalCollection(std::string_view name) {
  std::string folded;
  for (char ch : name)
    if (ch != '_' && ch != '-') folded.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  for (const char* c : kCollections) {
    std::string lc;
    for (const char* p = c; *p; ++p) lc.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(*p))));
    if (lc == folded) return c;
  }
  throw Error(ErrorCode::kNotFound, "unknown collection '" + std::string(name) + "'");
}

enum class Role { kStandard, kAdmin, kMachine };

inline const char* RoleName(Role r) {
  switch (r) {
    case Role::kAdmin: return "admin";
    case Role::kMachine: return "machine";
    default: return "standard";
  }
}

inline Role ParseRole(const std::string& s) {
  if (s == "admin") return Role::kAdmin;
  if (s == "machine") return Role::kMachine;
  if (s == "standard") return Role::kStandard;
  throw Error(ErrorCode::kValidationError, "unknown annotator role '" + s + "'");
}

struct Principal {
  std::string id;
  Role role = Role::kStandard;

  bool admin() const { return role == Role::kAdmin; }
  bool machine() const { return role == Role::kMachine; }
};

struct StoreOptions {
  bool sync = true;                              // fdatasync after every record
  std::uintmax_t compact_bytes = 32u << 20;      // journal size that triggers a snapshot
};

namespace detail {

inline std::string Crc32Hex(std::string_view s) {
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

// Ids and tokens; tokens are credentials, so both come from the OpenSSL CSPRNG.
inline std::string RandomHex(std::size_t chars) {
  std::vector<unsigned char> bytes((chars + 1) / 2);
  if (RAND_bytes(bytes.data(), static_cast<int>(bytes.size())) != 1)
    throw Error(ErrorCode::kIoError, "random source unavailable");
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned char b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  s.resize(chars);
  return s;
}

inline void WriteAll(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIoError, std::string("journal write failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

inline void SyncDir(const std::filesystem::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

}  // namespace detail

// Batch of put/del ops committed as one journal record.
class Batch {
 public:
  void Put(const std::string& collection, const std::string& id, Json doc) {
    doc["_id"] = id;
    ops_.push_back({{"op", "put"}, {"c", collection}, {"id", id}, {"doc", std::move(doc)}});
  }
  void Delete(const std::string& collection, const std::string& id) {
    ops_.push_back({{"op", "del"}, {"c", collection}, {"id", id}});
  }
  bool empty() const { return ops_.empty(); }
  const Json& ops() const { return ops_; }

 private:
  Json ops_ = Json::array();
};

class Database {
 public:
  explicit Database(std::filesystem::path dir, StoreOptions options = {})
      : dir_(std::move(dir)), options_(options) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::kIoError, "cannot create " + dir_.string() + ": " + ec.message());
    for (const char* c : kCollections) docs_[c];
    Recover();
    journal_fd_ = ::open(journal_path().c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (journal_fd_ < 0) throw Error(ErrorCode::kIoError, "cannot open " + journal_path().string());
  }

  Database(const Database&) = delete;
  Database& operator=(const Database&) = delete;

  ~Database() {
    if (journal_fd_ >= 0) ::close(journal_fd_);
  }

  const std::filesystem::path& dir() const { return dir_; }
  std::string name() const { return dir_.filename().string(); }
  std::filesystem::path journal_path() const { return dir_ / "journal.log"; }
  std::filesystem::path snapshot_path() const { return dir_ / "snapshot.json"; }
  std::filesystem::path files_dir() const { return dir_ / "files"; }
  std::filesystem::path models_dir() const { return dir_ / "models"; }

  std::uint64_t seq() const {
    std::shared_lock lock(mu_);
    return seq_;
  }

  // Creates the Meta document plus an admin and a machine annotator. Returns
  // {admin token, machine token}. Fails if the database already has annotators.
  std::pair<std::string, std::string> Initialize(const std::string& admin_name, std::string admin_token = {},
                                                 std::string machine_token = {}) {
    std::unique_lock lock(mu_);
    if (!docs_["Annotators"].empty())
      throw Error(ErrorCode::kValidationError, "database " + name() + " is already initialized");
    if (admin_token.empty()) admin_token = detail::RandomHex(32);
    if (machine_token.empty()) machine_token = detail::RandomHex(32);
    Batch b;
    b.Put("Meta", "meta", {{"name", name()}, {"version", 1}});
    b.Put("Annotators", admin_name, {{"name", admin_name}, {"role", "admin"}, {"token", admin_token}});
    b.Put("Annotators", kMachineAnnotator,
          {{"name", kMachineAnnotator}, {"role", "machine"}, {"token", machine_token}});
    CommitLocked(b);
    return {admin_token, machine_token};
  }

  // --- unchecked access (internal callers, jobs, CLI) -------------------------

  std::optional<Json> Get(std::string_view collection, const std::string& id) const {
    std::shared_lock lock(mu_);
    return GetLocked(CanonicalCollection(collection), id);
  }

  std::vector<Json> List(std::string_view collection) const {
    std::shared_lock lock(mu_);
    std::vector<Json> out;
    for (const auto& [id, doc] : docs_.at(CanonicalCollection(collection))) out.push_back(doc);
    return out;
  }

  template <typename Pred>
  std::vector<Json> Find(std::string_view collection, Pred pred) const {
    std::shared_lock lock(mu_);
    std::vector<Json> out;
    for (const auto& [id, doc] : docs_.at(CanonicalCollection(collection)))
      if (pred(doc)) out.push_back(doc);
    return out;
  }

  void Commit(const Batch& batch) {
    std::unique_lock lock(mu_);
    CommitLocked(batch);
  }

  std::string NewId() const { return detail::RandomHex(16); }

  // --- principals -------------------------------------------------------------

  Principal Authenticate(const std::string& token) const {
    std::shared_lock lock(mu_);
    if (!token.empty())
      for (const auto& [id, doc] : docs_.at("Annotators"))
        if (doc.value("token", std::string()) == token) return {id, ParseRole(doc.value("role", "standard"))};
    throw Error(ErrorCode::kUnauthorized, "unknown token");
  }

  Principal PrincipalOf(const std::string& annotator_id) const {
    std::shared_lock lock(mu_);
    const auto doc = GetLocked("Annotators", annotator_id);
    if (!doc) throw Error(ErrorCode::kNotFound, "no annotator '" + annotator_id + "'");
    return {annotator_id, ParseRole(doc->value("role", "standard"))};
  }

  // --- permission-checked document access -------------------------------------

  Json GetAs(const Principal& p, std::string_view collection, const std::string& id) const {
    const std::string c = CanonicalCollection(collection);
    if (c == "Annotations") return AnnotationView(id);
    std::shared_lock lock(mu_);
    auto doc = GetLocked(c, id);
    if (!doc) throw Error(ErrorCode::kNotFound, c + "/" + id + " not found");
    if (c == "Annotators" && !p.admin() && id != p.id) doc->erase("token");
    return *doc;
  }

  std::vector<Json> ListAs(const Principal& p, std::string_view collection) const {
    const std::string c = CanonicalCollection(collection);
    auto docs = List(c);
    if (c == "Annotators" && !p.admin())
      for (auto& d : docs)
        if (d.value("_id", std::string()) != p.id) d.erase("token");
    if (c == "AnnotationData") docs.clear();  // reachable through Annotations only
    return docs;
  }

  // Generic put for the metadata collections. Annotations are routed through
  // WriteAnnotation; AnnotationData is never written directly.
  void PutAs(const Principal& p, std::string_view collection, const std::string& id, Json doc) {
    const std::string c = CanonicalCollection(collection);
    if (c == "Annotations") {
      WriteAnnotation(p, id, doc);
      return;
    }
    if (c == "AnnotationData")
      throw Error(ErrorCode::kForbidden, "AnnotationData is written through its annotation");
    if (id.empty()) throw Error(ErrorCode::kValidationError, "empty document id");
    if (!doc.is_object()) throw Error(ErrorCode::kValidationError, "document must be a JSON object");
    if (c == "Annotators" || c == "Meta") {
      if (!p.admin()) throw Error(ErrorCode::kForbidden, "only admins manage " + c);
    } else if (p.role == Role::kStandard) {
      throw Error(ErrorCode::kForbidden, "standard users cannot modify " + c);
    }
    std::unique_lock lock(mu_);
    ValidateDocLocked(c, id, doc);
    Batch b;
    b.Put(c, id, std::move(doc));
    CommitLocked(b);
  }

  void DeleteAs(const Principal& p, std::string_view collection, const std::string& id) {
    const std::string c = CanonicalCollection(collection);
    if (c == "Annotations") {
      DeleteAnnotation(p, id);
      return;
    }
    if (c == "AnnotationData")
      throw Error(ErrorCode::kForbidden, "AnnotationData is deleted with its annotation");
    if (!p.admin()) throw Error(ErrorCode::kForbidden, "only admins delete " + c);
    std::unique_lock lock(mu_);
    if (!GetLocked(c, id)) throw Error(ErrorCode::kNotFound, c + "/" + id + " not found");
    if (const auto who = ReferrerLocked(c, id))
      throw Error(ErrorCode::kReferenceInUse, c + "/" + id + " is referenced by " + *who);
    Batch b;
    b.Delete(c, id);
    CommitLocked(b);
  }

  // --- annotations ------------------------------------------------------------

  // Creates (id empty or unknown) or overwrites an annotation. body carries
  // scheme, session, role, annotator, segments and optionally the flags. On
  // overwrite the previous segments become the backup. intent_owner must match
  // the holder of a write intent on the annotation, if any.
  std::string WriteAnnotation(const Principal& p, std::string id, const Json& body,
                              const std::string& intent_owner = {}) {
    std::unique_lock lock(mu_);
    if (!body.is_object()) throw Error(ErrorCode::kValidationError, "annotation body must be a JSON object");
    std::optional<Json> header = id.empty() ? std::nullopt : GetLocked("Annotations", id);
    if (header) {
      const std::string owner = header->value("annotator", std::string());
      if (!p.admin() && owner != p.id)
        throw Error(ErrorCode::kForbidden, p.id + " cannot edit annotation of " + owner);
      if (!p.admin() && header->value("is_locked", false))
        throw Error(ErrorCode::kLocked, "annotation " + id + " is locked");
      CheckIntentLocked(id, intent_owner);
    } else if (id.empty()) {
      id = NewId();
    }

    Json h = header ? *header : Json::object();
    auto take = [&](const char* key) {
      if (body.contains(key)) {
        if (!body[key].is_string()) throw Error(ErrorCode::kValidationError, std::string(key) + " must be a string");
        h[key] = body[key];
      }
    };
    if (body.contains("scheme") && body["scheme"].is_object()) h["scheme"] = body["scheme"].value("name", "");
    else take("scheme");
    take("session");
    take("role");
    take("annotator");
    if (!h.contains("annotator")) h["annotator"] = p.id;
    if (!p.admin() && h["annotator"] != p.id)
      throw Error(ErrorCode::kForbidden, p.id + " cannot write an annotation owned by " + h["annotator"].get<std::string>());
    if (!header) {
      h["is_finished"] = body.value("is_finished", false);
      h["is_locked"] = p.admin() ? body.value("is_locked", false) : false;
    }
    for (const char* key : {"annotator", "scheme", "role", "session"})
      if (!h.contains(key) || !h[key].is_string())
        throw Error(ErrorCode::kValidationError, std::string("annotation needs a '") + key + "'");

    const Scheme scheme = CheckReferencesLocked(h);
    DiscreteAnnotation a;
    a.scheme = scheme;
    a.segments = SegmentsFromJson(body.value("segments", Json::array()));
    a.Validate();

    Json data = Json::object();
    const std::string data_id = h.value("data", id);
    if (header) {
      if (const auto old = GetLocked("AnnotationData", data_id)) data["backup"] = old->at("segments");
    }
    if (!data.contains("backup")) data["backup"] = nullptr;
    data["annotation"] = id;
    data["segments"] = SegmentsToJson(a.segments);
    h["data"] = data_id;

    Batch b;
    b.Put("Annotations", id, std::move(h));
    b.Put("AnnotationData", data_id, std::move(data));
    CommitLocked(b);
    return id;
  }

  // Header fields plus segments and whether a backup exists.
  Json AnnotationView(const std::string& id) const {
    std::shared_lock lock(mu_);
    return AnnotationViewLocked(id);
  }

  DiscreteAnnotation ReadAnnotation(const std::string& id) const {
    std::shared_lock lock(mu_);
    const Json v = AnnotationViewLocked(id);
    DiscreteAnnotation a;
    a.scheme = SchemeLocked(v.at("scheme").get<std::string>());
    a.session_id = v.at("session").get<std::string>();
    a.role = v.at("role").get<std::string>();
    a.annotator_id = v.at("annotator").get<std::string>();
    a.is_finished = v.value("is_finished", false);
    a.is_locked = v.value("is_locked", false);
    a.segments = SegmentsFromJson(v.at("segments"));
    return a;
  }

  Scheme ReadScheme(const std::string& name) const {
    std::shared_lock lock(mu_);
    return SchemeLocked(name);
  }

  // Owner, or admin asking for in-place, gets the annotation itself. Anyone
  // else gets a fresh copy stored under their own id.
  Json LoadAnnotation(const Principal& p, const std::string& id, bool in_place = false) {
    std::unique_lock lock(mu_);
    Json v = AnnotationViewLocked(id);
    if (v.at("annotator") == p.id || (p.admin() && in_place)) {
      v["copied_from"] = nullptr;
      return v;
    }
    const std::string copy_id = NewId();
    Json h = *GetLocked("Annotations", id);
    h["annotator"] = p.id;
    h["is_finished"] = false;
    h["is_locked"] = false;
    h["data"] = copy_id;
    h["copied_from"] = id;
    Batch b;
    b.Put("Annotations", copy_id, std::move(h));
    b.Put("AnnotationData", copy_id, {{"annotation", copy_id}, {"segments", v.at("segments")}, {"backup", nullptr}});
    CommitLocked(b);
    Json out = AnnotationViewLocked(copy_id);
    out["copied_from"] = id;
    return out;
  }

  // Owner may finish/unfinish and lock their own annotation; only an admin may
  // unlock or touch flags on someone else's.
  Json SetFlags(const Principal& p, const std::string& id, std::optional<bool> is_finished,
                std::optional<bool> is_locked) {
    std::unique_lock lock(mu_);
    auto h = GetLocked("Annotations", id);
    if (!h) throw Error(ErrorCode::kNotFound, "annotation " + id + " not found");
    if (!p.admin()) {
      if (h->value("annotator", std::string()) != p.id)
        throw Error(ErrorCode::kForbidden, p.id + " cannot change flags of another user's annotation");
      const bool locked = h->value("is_locked", false);
      if (locked && is_locked == false) throw Error(ErrorCode::kForbidden, "only admins unlock annotations");
      if (locked && is_finished && *is_finished != h->value("is_finished", false))
        throw Error(ErrorCode::kLocked, "annotation " + id + " is locked");
    }
    if (is_finished) (*h)["is_finished"] = *is_finished;
    if (is_locked) (*h)["is_locked"] = *is_locked;
    Batch b;
    b.Put("Annotations", id, *h);
    CommitLocked(b);
    return AnnotationViewLocked(id);
  }

  // Swaps the current segments with the backup.
  Json RestoreBackup(const Principal& p, const std::string& id) {
    std::unique_lock lock(mu_);
    auto h = GetLocked("Annotations", id);
    if (!h) throw Error(ErrorCode::kNotFound, "annotation " + id + " not found");
    if (!p.admin() && h->value("annotator", std::string()) != p.id)
      throw Error(ErrorCode::kForbidden, p.id + " cannot restore another user's annotation");
    if (!p.admin() && h->value("is_locked", false)) throw Error(ErrorCode::kLocked, "annotation " + id + " is locked");
    CheckIntentLocked(id, {});
    const std::string data_id = h->value("data", id);
    auto data = GetLocked("AnnotationData", data_id);
    if (!data || data->at("backup").is_null()) throw Error(ErrorCode::kNotFound, "annotation " + id + " has no backup");
    std::swap((*data)["segments"], (*data)["backup"]);
    Batch b;
    b.Put("AnnotationData", data_id, *data);
    CommitLocked(b);
    return AnnotationViewLocked(id);
  }

  void DeleteAnnotation(const Principal& p, const std::string& id) {
    std::unique_lock lock(mu_);
    auto h = GetLocked("Annotations", id);
    if (!h) throw Error(ErrorCode::kNotFound, "annotation " + id + " not found");
    if (!p.admin() && h->value("annotator", std::string()) != p.id)
      throw Error(ErrorCode::kForbidden, p.id + " cannot delete another user's annotation");
    if (!p.admin() && h->value("is_locked", false)) throw Error(ErrorCode::kLocked, "annotation " + id + " is locked");
    CheckIntentLocked(id, {});
    Batch b;
    b.Delete("Annotations", id);
    b.Delete("AnnotationData", h->value("data", id));
    CommitLocked(b);
  }

  // --- write intents ------------------------------------------------------------

  bool TryAcquireIntent(const std::string& annotation_id, const std::string& owner) {
    std::unique_lock lock(mu_);
    return intents_.emplace(annotation_id, owner).second;
  }

  void ReleaseIntent(const std::string& annotation_id, const std::string& owner) {
    std::unique_lock lock(mu_);
    const auto it = intents_.find(annotation_id);
    if (it != intents_.end() && it->second == owner) intents_.erase(it);
  }

  // --- maintenance --------------------------------------------------------------

  // Referential integrity and shape checks. Empty result means healthy.
  std::vector<std::string> Audit() const {
    std::shared_lock lock(mu_);
    return AuditLocked();
  }

  Json Export() const {
    std::shared_lock lock(mu_);
    Json out = Json::object();
    for (const auto& [c, docs] : docs_) {
      Json arr = Json::array();
      for (const auto& [id, doc] : docs) arr.push_back(doc);
      out[c] = std::move(arr);
    }
    return out;
  }

  // Bulk load of an Export() document, committed as a single record. Existing
  // ids are overwritten. The result must pass Audit, else nothing is applied.
  void Import(const Json& dump) {
    std::unique_lock lock(mu_);
    Batch b;
    auto saved = docs_;
    try {
      for (const auto& [c, arr] : dump.items()) {
        const std::string cc = CanonicalCollection(c);
        for (const auto& doc : arr) {
          const std::string id = doc.at("_id").get<std::string>();
          b.Put(cc, id, doc);
          docs_[cc][id] = doc;
        }
      }
    } catch (const nlohmann::json::exception& e) {
      docs_ = std::move(saved);
      throw Error(ErrorCode::kValidationError, std::string("bad import document: ") + e.what());
    } catch (...) {
      docs_ = std::move(saved);
      throw;
    }
    const auto problems = AuditLocked();
    docs_ = std::move(saved);
    if (!problems.empty()) throw Error(ErrorCode::kValidationError, "import breaks integrity: " + problems.front());
    CommitLocked(b);
  }

  // Writes a snapshot and truncates the journal.
  void Compact() {
    std::unique_lock lock(mu_);
    CompactLocked();
  }

 private:
  // --- persistence --------------------------------------------------------------

  void Recover() {
    if (std::filesystem::exists(snapshot_path())) {
      const auto bytes = cml::detail::ReadFileBytes(snapshot_path());
      Json snap;
      try {
        snap = Json::parse(bytes.begin(), bytes.end());
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::kCacheCorrupt, "snapshot " + snapshot_path().string() + " is unreadable");
      }
      seq_ = snap.value("seq", std::uint64_t{0});
      for (const auto& [c, docs] : snap.at("collections").items())
        for (const auto& [id, doc] : docs.items()) docs_[c][id] = doc;
    }
    if (!std::filesystem::exists(journal_path())) return;
    const auto bytes = cml::detail::ReadFileBytes(journal_path());
    const std::string text(bytes.begin(), bytes.end());
    std::size_t pos = 0, good = 0;
    while (pos < text.size()) {
      const std::size_t nl = text.find('\n', pos);
      if (nl == std::string::npos) break;
      const std::string_view line(text.data() + pos, nl - pos);
      if (line.size() < 10 || line[8] != ' ') break;
      const std::string_view payload = line.substr(9);
      if (detail::Crc32Hex(payload) != line.substr(0, 8)) break;
      Json rec;
      try {
        rec = Json::parse(payload);
      } catch (const nlohmann::json::parse_error&) {
        break;
      }
      const std::uint64_t s = rec.value("seq", std::uint64_t{0});
      if (s > seq_) {
        ApplyOps(rec.at("ops"));
        seq_ = s;
      }
      pos = nl + 1;
      good = pos;
    }
    if (good < text.size()) std::filesystem::resize_file(journal_path(), good);
  }

  void ApplyOps(const Json& ops) {
    for (const auto& op : ops) {
      auto& coll = docs_[op.at("c").get<std::string>()];
      const std::string id = op.at("id").get<std::string>();
      if (op.at("op") == "put") coll[id] = op.at("doc");
      else coll.erase(id);
    }
  }

  void CommitLocked(const Batch& batch) {
    if (batch.empty()) return;
    const Json rec = {{"seq", seq_ + 1}, {"ops", batch.ops()}};
    const std::string payload = rec.dump();
    detail::WriteAll(journal_fd_, detail::Crc32Hex(payload) + ' ' + payload + '\n');
    if (options_.sync) ::fdatasync(journal_fd_);
    ApplyOps(batch.ops());
    ++seq_;
    std::error_code ec;
    if (std::filesystem::file_size(journal_path(), ec) > options_.compact_bytes && !ec) CompactLocked();
  }

  void CompactLocked() {
    Json snap = {{"seq", seq_}, {"collections", Json::object()}};
    for (const auto& [c, docs] : docs_) {
      Json obj = Json::object();
      for (const auto& [id, doc] : docs) obj[id] = doc;
      snap["collections"][c] = std::move(obj);
    }
    const std::string text = snap.dump();
    const auto tmp = dir_ / ("snapshot.json.tmp" + std::to_string(::getpid()));
    {
      const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
      if (fd < 0) throw Error(ErrorCode::kIoError, "cannot write " + tmp.string());
      detail::WriteAll(fd, text);
      ::fsync(fd);
      ::close(fd);
    }
    std::filesystem::rename(tmp, snapshot_path());
    detail::SyncDir(dir_);
    // Records already in the snapshot are skipped on replay, so a crash before
    // the truncate below is harmless.
    if (::ftruncate(journal_fd_, 0) != 0) throw Error(ErrorCode::kIoError, "cannot truncate journal");
    ::fsync(journal_fd_);
  }

  // --- helpers (caller holds mu_) ------------------------------------------------

  std::vector<std::string> AuditLocked() const {
    std::vector<std::string> problems;
    auto exists = [&](const char* c, const Json& doc, const char* key) {
      return doc.contains(key) && doc[key].is_string() && docs_.at(c).count(doc[key].get<std::string>()) > 0;
    };
    for (const auto& [id, h] : docs_.at("Annotations")) {
      const std::string where = "Annotations/" + id;
      if (!exists("Annotators", h, "annotator")) problems.push_back(where + ": missing annotator");
      if (!exists("Schemes", h, "scheme")) problems.push_back(where + ": missing scheme");
      if (!exists("Roles", h, "role")) problems.push_back(where + ": missing role");
      if (!exists("Sessions", h, "session")) problems.push_back(where + ": missing session");
      const auto data = GetLocked("AnnotationData", h.value("data", id));
      if (!data) {
        problems.push_back(where + ": missing AnnotationData");
        continue;
      }
      if (data->value("annotation", std::string()) != id) problems.push_back(where + ": data points elsewhere");
      if (!exists("Schemes", h, "scheme")) continue;
      try {
        DiscreteAnnotation a;
        a.scheme = SchemeLocked(h["scheme"].get<std::string>());
        a.segments = SegmentsFromJson(data->at("segments"));
        a.Validate();
        if (!data->contains("backup")) throw Error(ErrorCode::kInvalidAnnotation, "no backup slot");
        if (!(*data)["backup"].is_null()) {
          a.segments = SegmentsFromJson((*data)["backup"]);
          a.Validate();
        }
      } catch (const std::exception& e) {
        problems.push_back(where + ": " + e.what());
      }
    }
    std::map<std::string, int> owners;
    for (const auto& [id, h] : docs_.at("Annotations")) ++owners[h.value("data", id)];
    for (const auto& [id, d] : docs_.at("AnnotationData")) {
      if (owners[id] != 1) problems.push_back("AnnotationData/" + id + ": owned by " + std::to_string(owners[id]) + " annotations");
    }
    for (const auto& [id, s] : docs_.at("Streams")) {
      if (!exists("Sessions", s, "session")) problems.push_back("Streams/" + id + ": missing session");
      if (s.contains("role") && !exists("Roles", s, "role")) problems.push_back("Streams/" + id + ": missing role");
    }
    for (const auto& [id, a] : docs_.at("Annotators")) {
      try {
        ParseRole(a.value("role", "standard"));
      } catch (const Error& e) {
        problems.push_back("Annotators/" + id + ": " + e.what());
      }
    }
    return problems;
  }

  std::optional<Json> GetLocked(const std::string& c, const std::string& id) const {
    const auto& coll = docs_.at(c);
    const auto it = coll.find(id);
    if (it == coll.end()) return std::nullopt;
    return std::optional<Json>(std::in_place, it->second);
  }

  Scheme SchemeLocked(const std::string& name) const {
    const auto doc = GetLocked("Schemes", name);
    if (!doc) throw Error(ErrorCode::kMissingReference, "scheme '" + name + "' does not exist");
    Json j = *doc;
    if (!j.contains("name")) j["name"] = name;
    return SchemeFromJson(j);
  }

  Scheme CheckReferencesLocked(const Json& h) const {
    auto need = [&](const char* c, const char* key) {
      const std::string v = h.at(key).get<std::string>();
      if (!GetLocked(c, v)) throw Error(ErrorCode::kMissingReference, std::string(key) + " '" + v + "' does not exist");
    };
    need("Annotators", "annotator");
    need("Roles", "role");
    need("Sessions", "session");
    return SchemeLocked(h.at("scheme").get<std::string>());
  }

  void CheckIntentLocked(const std::string& id, const std::string& owner) const {
    const auto it = intents_.find(id);
    if (it != intents_.end() && it->second != owner)
      throw Error(ErrorCode::kLocked, "annotation " + id + " is being written by job " + it->second);
  }

  Json AnnotationViewLocked(const std::string& id) const {
    const auto h = GetLocked("Annotations", id);
    if (!h) throw Error(ErrorCode::kNotFound, "annotation " + id + " not found");
    Json v = *h;
    const auto data = GetLocked("AnnotationData", h->value("data", id));
    v["segments"] = data ? data->at("segments") : Json::array();
    v["has_backup"] = data && !data->at("backup").is_null();
    return v;
  }

  void ValidateDocLocked(const std::string& c, const std::string& id, Json& doc) const {
    if (c == "Annotators") {
      ParseRole(doc.value("role", "standard"));
      if (!doc.contains("role")) doc["role"] = "standard";
      if (!doc.contains("name")) doc["name"] = id;
      if (!doc.contains("token") || !doc["token"].is_string() || doc["token"].get<std::string>().empty())
        doc["token"] = detail::RandomHex(32);
      for (const auto& [other, d] : docs_.at("Annotators"))
        if (other != id && d.value("token", std::string()) == doc["token"])
          throw Error(ErrorCode::kValidationError, "token already in use");
    } else if (c == "Schemes") {
      if (!doc.contains("name")) doc["name"] = id;
      SchemeFromJson(doc);
      // Changing classes under existing annotations could orphan segment ids.
      if (const auto old = GetLocked(c, id); old && (*old)["classes"] != doc["classes"])
        if (const auto who = ReferrerLocked(c, id))
          throw Error(ErrorCode::kReferenceInUse, "scheme " + id + " is used by " + *who);
    } else if (c == "Streams") {
      for (const char* key : {"session", "media_type", "url"})
        if (!doc.contains(key) || !doc[key].is_string())
          throw Error(ErrorCode::kValidationError, std::string("stream needs a '") + key + "'");
      const std::string session = doc["session"].get<std::string>();
      if (!GetLocked("Sessions", session))
        throw Error(ErrorCode::kMissingReference, "session '" + session + "' does not exist");
      if (doc.contains("role") && !GetLocked("Roles", doc["role"].get<std::string>()))
        throw Error(ErrorCode::kMissingReference, "role '" + doc["role"].get<std::string>() + "' does not exist");
      const std::filesystem::path url(doc["url"].get<std::string>());
      if (url.is_absolute() || url.lexically_normal().string().starts_with(".."))
        throw Error(ErrorCode::kValidationError, "stream url must be relative and inside the database");
    }
  }

  // First document that points at collection/id, as "Collection/id".
  std::optional<std::string> ReferrerLocked(const std::string& c, const std::string& id) const {
    auto scan = [&](const char* coll, const char* key) -> std::optional<std::string> {
      for (const auto& [other, doc] : docs_.at(coll))
        if (doc.value(key, std::string()) == id) return std::string(coll) + "/" + other;
      return std::nullopt;
    };
    if (c == "Sessions") {
      if (auto r = scan("Annotations", "session")) return r;
      return scan("Streams", "session");
    }
    if (c == "Roles") {
      if (auto r = scan("Annotations", "role")) return r;
      return scan("Streams", "role");
    }
    if (c == "Schemes") return scan("Annotations", "scheme");
    if (c == "Annotators") return scan("Annotations", "annotator");
    return std::nullopt;
  }

  std::filesystem::path dir_;
  StoreOptions options_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::map<std::string, Json>> docs_;
  std::map<std::string, std::string> intents_;  // annotation id -> job id
  std::uint64_t seq_ = 0;
  int journal_fd_ = -1;
};

}  // namespace cml::store
