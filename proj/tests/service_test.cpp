// tests/service_test.cpp

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

#include <gtest/gtest.h>

#include <chrono>
#include <thread>

#include "cml/service.hpp"
#include "store_fixture.hpp"

namespace cml::service {
namespace {

using test::AnnotationBody;

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir();
    {
      store::Database db(*dir_ / "demo", {.sync = false});
      test::SeedDatabase(db);
      const store::Principal root{"root", store::Role::kAdmin};
      const auto pattern = test::TonePattern(60.0);
      std::filesystem::create_directories(db.files_dir() / "audio");
      WriteWav(db.files_dir() / "audio" / "s1.wav", pattern.audio);
      db.PutAs(root, "Streams", "s1.audio",
               {{"session", "s1"}, {"role", "speaker"}, {"media_type", "audio"}, {"url", "audio/s1.wav"}});
      db.PutAs(root, "Sessions", "empty", {{"name", "empty"}});
      truth_ = new DiscreteAnnotation(pattern.truth);
    }
    service_ = new Service({.root = dir_->path(), .workers = 2, .store = {.sync = false}});
    port_ = service_->Start();
  }
  static void TearDownTestSuite() {
    delete service_;
    delete truth_;
    delete dir_;
  }

  static httplib::Client Client(const std::string& token) {
    httplib::Client c("127.0.0.1", port_);
    if (!token.empty()) c.set_bearer_token_auth(token);
    c.set_read_timeout(60, 0);
    return c;
  }
  static Json Parse(const httplib::Result& r) { return Json::parse(r->body); }

  // Submits a job and polls it through the API until it settles.
  static Json RunJob(const std::string& token, const Json& request) {
    auto c = Client(token);
    auto r = c.Post("/jobs", request.dump(), "application/json");
    EXPECT_EQ(r->status, 202) << r->body;
    const std::string id = Parse(r).at("id");
    for (int i = 0; i < 6000; ++i) {
      const Json s = Parse(c.Get("/jobs/" + id));
      if (s.at("state") == "done" || s.at("state") == "failed") return s;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    ADD_FAILURE() << "job " << id << " did not settle";
    return Json::object();
  }

  static void Extract() {
    static std::once_flag once;
    std::call_once(once, [] {
      const Json s = RunJob("tok-root", {{"db", "demo"}, {"type", "extract"}, {"params", {{"session", "s1"}}}});
      ASSERT_EQ(s.at("state"), "done") << s.dump();
    });
  }

  static test::TempDir* dir_;
  static Service* service_;
  static DiscreteAnnotation* truth_;
  static int port_;
};
test::TempDir* ServiceTest::dir_ = nullptr;
Service* ServiceTest::service_ = nullptr;
DiscreteAnnotation* ServiceTest::truth_ = nullptr;
int ServiceTest::port_ = 0;

TEST_F(ServiceTest, HealthAndAuth) {
  EXPECT_EQ(Client("").Get("/health")->status, 200);
  EXPECT_EQ(Client("").Get("/db/demo/sessions")->status, 401);
  EXPECT_EQ(Client("wrong").Get("/db/demo/sessions")->status, 401);
  EXPECT_EQ(Client("tok-alice").Get("/db/nope/sessions")->status, 404);
  EXPECT_EQ(Client("tok-alice").Get("/db/../sessions")->status, 404);
  EXPECT_EQ(Client("tok-alice").Get("/db/demo/widgets")->status, 404);
  const auto r = Client("tok-alice").Get("/db/demo/sessions");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(Parse(r).size(), 2u);
  const Json err = Parse(Client("tok-alice").Get("/db/demo/sessions/zzz"));
  EXPECT_EQ(err.at("error"), "NotFound");
}

TEST_F(ServiceTest, DocumentRoutes) {
  auto admin = Client("tok-root");
  auto alice = Client("tok-alice");
  auto r = admin.Put("/db/demo/roles/listener", R"({"name": "listener"})", "application/json");
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(Parse(r).at("_id"), "listener");
  EXPECT_EQ(alice.Put("/db/demo/roles/x", "{}", "application/json")->status, 403);
  r = admin.Post("/db/demo/sessions", R"({"name": "posted"})", "application/json");
  EXPECT_EQ(r->status, 201);
  const std::string sid = Parse(r).at("_id");
  EXPECT_EQ(admin.Post("/db/demo/sessions", Json{{"_id", sid}}.dump(), "application/json")->status, 400);
  EXPECT_EQ(admin.Delete("/db/demo/sessions/" + sid)->status, 200);
  EXPECT_EQ(admin.Get("/db/demo/sessions/" + sid)->status, 404);
  EXPECT_EQ(admin.Put("/db/demo/roles/y", "{not json", "application/json")->status, 400);
  EXPECT_EQ(Parse(alice.Get("/db/demo/annotators/bob")).contains("token"), false);
}

TEST_F(ServiceTest, AnnotationLifecycle) {
  auto alice = Client("tok-alice");
  auto bob = Client("tok-bob");
  auto admin = Client("tok-root");
  auto r = alice.Post("/db/demo/annotations", AnnotationBody("alice", {{0, 1, 1, 1.0}}).dump(), "application/json");
  ASSERT_EQ(r->status, 201) << r->body;
  const std::string id = Parse(r).at("_id");
  const std::string path = "/db/demo/annotations/" + id;

  r = alice.Put(path, AnnotationBody("alice", {{0, 2, 2, 1.0}}).dump(), "application/json");
  ASSERT_EQ(r->status, 200);
  EXPECT_TRUE(Parse(r).at("has_backup").get<bool>());
  EXPECT_EQ(bob.Put(path, AnnotationBody("alice", {}).dump(), "application/json")->status, 403);
  EXPECT_EQ(alice.Put(path, AnnotationBody("alice", {}, "missing").dump(), "application/json")->status, 409);

  r = bob.Post(path + "/load", "{}", "application/json");
  ASSERT_EQ(r->status, 200);
  const Json copy = Parse(r);
  EXPECT_NE(copy.at("_id"), id);
  EXPECT_EQ(copy.at("annotator"), "bob");
  EXPECT_EQ(Parse(admin.Post(path + "/load", R"({"in_place": true})", "application/json")).at("_id"), id);

  EXPECT_EQ(bob.Post(path + "/flags", R"({"is_locked": true})", "application/json")->status, 403);
  EXPECT_EQ(admin.Post(path + "/flags", R"({"is_locked": true})", "application/json")->status, 200);
  EXPECT_EQ(alice.Put(path, AnnotationBody("alice", {}).dump(), "application/json")->status, 423);
  EXPECT_EQ(alice.Post(path + "/flags", R"({"is_locked": "yes"})", "application/json")->status, 400);
  EXPECT_EQ(admin.Put(path, AnnotationBody("alice", {{0, 3, 3, 1.0}}).dump(), "application/json")->status, 200);

  r = admin.Post(path + "/restore", "", "application/json");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(SegmentsFromJson(Parse(r).at("segments")), (std::vector<Segment>{{0, 2, 2, 1.0}}));
  EXPECT_EQ(admin.Delete("/db/demo/schemes/toy")->status, 409);
  EXPECT_EQ(admin.Get("/db/demo/annotation_data")->status, 200);
  EXPECT_TRUE(Parse(admin.Get("/db/demo/annotation_data")).empty());
}

TEST_F(ServiceTest, StreamByteRanges) {
  const auto file = cml::detail::ReadFileBytes(*dir_ / "demo" / "files" / "audio" / "s1.wav");
  auto alice = Client("tok-alice");
  auto r = alice.Get("/streams/s1.audio/data?db=demo");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->body.size(), file.size());
  EXPECT_EQ(r->get_header_value("Content-Type"), "audio/wav");
  const std::string bytes(file.begin(), file.end());
  EXPECT_EQ(r->body, bytes);

  r = alice.Get("/streams/s1.audio/data?db=demo", {httplib::make_range_header({{100, 199}})});
  ASSERT_EQ(r->status, 206);
  ASSERT_EQ(r->body.size(), 100u);
  EXPECT_EQ(r->body, bytes.substr(100, 100));
  r = alice.Get("/streams/s1.audio/data?db=demo", {httplib::make_range_header({{static_cast<ssize_t>(file.size()) - 10, -1}})});
  ASSERT_EQ(r->status, 206);
  EXPECT_EQ(r->body, bytes.substr(bytes.size() - 10));

  EXPECT_EQ(alice.Get("/streams/s1.audio/data")->status, 400);
  EXPECT_EQ(alice.Get("/streams/none/data?db=demo")->status, 404);
  EXPECT_EQ(Client("").Get("/streams/s1.audio/data?db=demo")->status, 401);
}

TEST_F(ServiceTest, CompleteJobAppendsAfterManualPart) {
  Extract();
  auto alice = Client("tok-alice");
  const DiscreteAnnotation manual = test::Prefix(*truth_, 30.0);
  auto r = alice.Post("/db/demo/annotations", AnnotationBody("alice", manual.segments).dump(), "application/json");
  ASSERT_EQ(r->status, 201);
  const std::string id = Parse(r).at("_id");
  const Json s = RunJob("tok-alice", {{"db", "demo"}, {"type", "complete"}, {"params", {{"annotation", id}}}});
  ASSERT_EQ(s.at("state"), "done") << s.dump();
  EXPECT_GT(s.at("result").at("segments_added").get<int>(), 0);
  const auto segs = SegmentsFromJson(Parse(alice.Get("/db/demo/annotations/" + id)).at("segments"));
  ASSERT_GT(segs.size(), manual.segments.size());
  for (std::size_t i = 0; i < manual.segments.size(); ++i) EXPECT_EQ(segs[i], manual.segments[i]);
  for (std::size_t i = manual.segments.size(); i < segs.size(); ++i)
    EXPECT_GE(segs[i].from_s, manual.segments.back().to_s);

  // Someone else may not complete alice's tier.
  r = Client("tok-bob").Post("/jobs", Json{{"db", "demo"}, {"type", "complete"}, {"params", {{"annotation", id}}}}.dump(),
                             "application/json");
  EXPECT_EQ(r->status, 403);
}

TEST_F(ServiceTest, SecondJobOnSameAnnotationWaitsForIntent) {
  Extract();
  auto alice = Client("tok-alice");
  auto r = alice.Post("/db/demo/annotations", AnnotationBody("alice", test::Prefix(*truth_, 20.0).segments).dump(),
                      "application/json");
  const std::string id = Parse(r).at("_id");
  auto db = service_->Open("demo");
  ASSERT_TRUE(db->TryAcquireIntent(id, "first"));  // stands in for a running job
  const Json req = {{"db", "demo"}, {"type", "complete"}, {"params", {{"annotation", id}}}};
  const std::string job = Parse(alice.Post("/jobs", req.dump(), "application/json")).at("id");
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  EXPECT_EQ(Parse(alice.Get("/jobs/" + job)).at("state"), "queued");
  // Direct writes are refused while the intent is held; reads still work.
  EXPECT_EQ(alice.Put("/db/demo/annotations/" + id, AnnotationBody("alice", {}).dump(), "application/json")->status, 423);
  EXPECT_EQ(alice.Get("/db/demo/annotations/" + id)->status, 200);
  db->ReleaseIntent(id, "first");
  const auto done = service_->job_manager().Wait(job, std::chrono::seconds(60));
  EXPECT_EQ(done.state, jobs::JobState::kDone);

  // Two real jobs on one annotation both finish, one after the other.
  const std::string a = Parse(alice.Post("/jobs", req.dump(), "application/json")).at("id");
  const std::string b = Parse(alice.Post("/jobs", req.dump(), "application/json")).at("id");
  EXPECT_EQ(service_->job_manager().Wait(a, std::chrono::seconds(60)).state, jobs::JobState::kDone);
  EXPECT_EQ(service_->job_manager().Wait(b, std::chrono::seconds(60)).state, jobs::JobState::kDone);
  EXPECT_TRUE(db->Audit().empty());
}

TEST_F(ServiceTest, TrainTransferEvaluate) {
  Extract();
  auto admin = Client("tok-root");
  auto r = admin.Post("/db/demo/annotations", AnnotationBody("root", truth_->segments).dump(), "application/json");
  const std::string id = Parse(r).at("_id");
  admin.Post("/db/demo/annotations/" + id + "/flags", R"({"is_finished": true})", "application/json");

  Json s = RunJob("tok-root", {{"db", "demo"}, {"type", "train"}, {"params", {{"annotations", {id}}}}});
  ASSERT_EQ(s.at("state"), "done") << s.dump();
  const std::string model = s.at("result").at("model");
  EXPECT_EQ(s.at("result").at("dim"), 429);

  const Json transfer = {{"db", "demo"},
                         {"type", "transfer"},
                         {"params", {{"model", model}, {"session", "s1"}, {"role", "speaker"}, {"scheme", "toy"}}}};
  s = RunJob("tok-alice", transfer);
  ASSERT_EQ(s.at("state"), "done") << s.dump();
  const std::string machine_id = s.at("result").at("annotation");
  const Json tier = Parse(admin.Get("/db/demo/annotations/" + machine_id));
  EXPECT_EQ(tier.at("annotator"), kMachineAnnotator);
  EXPECT_FALSE(tier.at("segments").empty());
  // A second transfer replaces the machine tier and keeps the old one as backup.
  s = RunJob("tok-alice", transfer);
  EXPECT_EQ(s.at("result").at("annotation"), machine_id);
  EXPECT_TRUE(Parse(admin.Get("/db/demo/annotations/" + machine_id)).at("has_backup").get<bool>());

  s = RunJob("tok-root", {{"db", "demo"}, {"type", "evaluate"}, {"params", {{"model", model}, {"annotations", {id}}}}});
  ASSERT_EQ(s.at("state"), "done") << s.dump();
  EXPECT_GT(s.at("result").at("recall").at("ua").get<double>(), 0.9);
}

TEST_F(ServiceTest, JobValidation) {
  auto alice = Client("tok-alice");
  auto submit = [&](const Json& req) { return alice.Post("/jobs", req.dump(), "application/json"); };
  auto r = submit({{"db", "demo"}, {"type", "extract"}, {"params", {{"session", "nope"}}}});
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(Parse(r).at("error"), "ValidationError");
  EXPECT_EQ(submit({{"db", "demo"}, {"type", "extract"}, {"params", {{"session", "empty"}}}})->status, 400);
  EXPECT_EQ(submit({{"db", "demo"},
                    {"type", "transfer"},
                    {"params", {{"model", "m"}, {"session", "nope"}, {"role", "speaker"}, {"scheme", "toy"}}}})
                ->status,
            400);
  EXPECT_EQ(submit({{"db", "demo"}, {"type", "dance"}})->status, 400);
  EXPECT_EQ(submit({{"type", "train"}})->status, 400);
  EXPECT_EQ(submit({{"db", "demo"}, {"type", "train"}, {"params", {{"annotations", "x"}}}})->status, 400);
  EXPECT_EQ(submit({{"db", "demo"}, {"type", "simulate"}, {"params", {{"train", {"x"}}, {"test", {"y"}}}}})->status, 400);
  r = alice.Get("/jobs/doesnotexist");
  EXPECT_EQ(r->status, 404);
  EXPECT_EQ(Parse(r).at("error"), "JobNotFound");
  EXPECT_THROW(service_->job_manager().Status("doesnotexist"), Error);
}

TEST_F(ServiceTest, FailedJobReportsError) {
  Extract();
  auto alice = Client("tok-alice");
  // One class only, no gaps: the engine refuses to train.
  auto r = alice.Post("/db/demo/annotations", AnnotationBody("alice", {{0, 10, 1, 1.0}}).dump(), "application/json");
  const std::string id = Parse(r).at("_id");
  const Json s = RunJob("tok-alice", {{"db", "demo"}, {"type", "complete"}, {"params", {{"annotation", id}}}});
  EXPECT_EQ(s.at("state"), "failed");
  EXPECT_EQ(s.at("error").at("code"), "DegenerateData");
  // The intent is released after the failure.
  EXPECT_EQ(alice.Put("/db/demo/annotations/" + id, AnnotationBody("alice", {}).dump(), "application/json")->status, 200);
}

}  // namespace
}  // namespace cml::service
