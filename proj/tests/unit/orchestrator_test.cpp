// Copyright 2026 The Veilbreak Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>
#include <sys/wait.h>

#include "support/fixtures.hpp"
#include "veilbreak/orchestrator.hpp"

namespace vb = veilbreak;
using vb::testing::MockReply;
using vb::testing::MockServer;
using vb::testing::TempDir;

namespace {

constexpr double M = vb::kMissingLogit;

std::string golden_path(const std::string& name) {
  return std::string(VEILBREAK_GOLDEN_DIR) + "/score/" + name;
}

/// Compares against a frozen golden file; VEILBREAK_UPDATE_GOLDENS=1
/// rewrites it instead.
void expect_golden(const std::string& actual, const std::string& name) {
  if (std::getenv("VEILBREAK_UPDATE_GOLDENS")) {
    vb::write_text_file(golden_path(name), actual);
    return;
  }
  EXPECT_EQ(actual, vb::read_file_bytes(golden_path(name))) << name;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(VEILBREAK_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Workspace : ::testing::Test {
  TempDir tmp{"vb-orch"};
  std::ostringstream log;
  vb::Services svc;

  void SetUp() override { svc.log = &log; }

  vb::RunConfig config(nlohmann::json j) {
    if (!j.contains("output_dir")) j["output_dir"] = "out";
    vb::write_text_file(tmp.str("config.json"), j.dump(2));
    return vb::load_config(tmp.str("config.json"));
  }

  void write_dataset(const std::string& name, const vb::Dataset& d) {
    vb::write_dataset(d, tmp.str(name));
  }
};

// --- config ---------------------------------------------------------------

TEST_F(Workspace, ConfigResolvesRelativePathsAndAttacks) {
  write_dataset("bio.jsonl", vb::testing::synthetic_dataset(4, 1));
  vb::write_text_file(tmp.str("hi.txt"), "हिन्दी");
  const auto cfg = config({{"datasets", {{"bio", "bio.jsonl"}}},
                           {"attacks",
                            {"original", "hindi_filler_text", "translated_korean",
                             {{"name", "poem_hot"}, {"kind", "poem"}, {"temperature", 1.5}}}},
                           {"filler_sources", {{"hindi", "hi.txt"}}},
                           {"retry", {{"attempts", 5}, {"base_delay_ms", 10}}},
                           {"shots", {{"k", 0}}},
                           {"reproducible", true}});
  EXPECT_EQ(cfg.datasets[0].second, tmp.str("bio.jsonl"));
  ASSERT_EQ(cfg.attacks.size(), 4u);
  EXPECT_FALSE(cfg.attacks[0].spec);
  EXPECT_EQ(cfg.attacks[1].spec->filler_source, tmp.str("hi.txt"));
  EXPECT_EQ(cfg.attacks[2].spec->language, "Korean");
  EXPECT_EQ(cfg.attacks[3].spec->temperature, 1.5);
  EXPECT_EQ(cfg.retry.attempts, 5);
  EXPECT_EQ(cfg.retry.base_delay.count(), 10);
  EXPECT_EQ(cfg.output_dir, tmp.path() / "out");
  EXPECT_TRUE(cfg.reproducible);
}

TEST_F(Workspace, ConfigErrorsNameTheKey) {
  auto message = [&](nlohmann::json j, std::string_view command = "transform") -> std::string {
    try {
      vb::validate_for(config(std::move(j)), command);
    } catch (const vb::ConfigError& e) {
      return e.what();
    }
    return "";
  };
  EXPECT_NE(message({{"datasets", {{"bio", "nope.jsonl"}}}}).find("datasets.bio"),
            std::string::npos);
  write_dataset("bio.jsonl", vb::testing::synthetic_dataset(4, 1));
  const nlohmann::json ds = {{"bio", "bio.jsonl"}};
  EXPECT_NE(message({{"datasets", ds}, {"attacks", {"bogus"}}}).find("unknown attack"),
            std::string::npos);
  EXPECT_NE(message({{"datasets", ds}, {"attacks", {"hindi_filler_text"}}})
                .find("filler_sources.hindi"),
            std::string::npos);
  EXPECT_NE(message({{"datasets", ds}, {"attacks", {"rephrased_poem"}}}).find("rephraser_endpoint"),
            std::string::npos);
  EXPECT_NE(message({{"datasets", ds}}, "evaluate").find("eval_endpoint"), std::string::npos);
  EXPECT_NE(message({{"datasets", ds}, {"probe", {{"dumps", {{{"path", "x.actv"}}}}}}}, "probe")
                .find("probe.dumps.x"),
            std::string::npos);
  EXPECT_NE(message({{"datasets", ds}, {"eval_endpoint", {{"url", "localhost"}, {"model", "m"}}}})
                .find("scheme"),
            std::string::npos);
  EXPECT_NE(message({{"datasets", ds}, {"attacks", {"original", "original"}}}).find("duplicate"),
            std::string::npos);
  EXPECT_THROW(vb::load_config(tmp.str("missing.json")), vb::ConfigError);
}

// --- score ----------------------------------------------------------------

vb::ResponseRecord ok(const std::string& id, const std::string& text, std::array<double, 4> logits) {
  vb::ModelResponse r;
  r.item_id = id;
  r.next_token_text = text;
  r.option_logits = logits;
  r.answer = vb::output_letter(text);
  r.logit_pick = vb::logit_argmax(logits);
  return {id, r, "", ""};
}

/// Two response sets over six gold-A items. The "original" set has the
/// hand-computed rates acc 1/6, acc(answered) 1/3, %-acc 1/2,
/// acc(logits) 3/5 (right 2/3, wrong 1/2), output score 7/24,
/// adjusted -1/9, se sqrt(5/216). The filler set answers everything,
/// half correctly: acc 1/2, acc(logits) 1/2, wrong-format logit rate
/// undefined.
void write_score_fixture(const TempDir& tmp, vb::ResponseSet* original_out = nullptr) {
  vb::Dataset keys;
  for (int i = 0; i < 6; ++i) keys.items.push_back(vb::testing::make_item("q" + std::to_string(i), 0));
  vb::write_dataset(keys, tmp.str("keys.jsonl"));
  vb::Dataset filler = keys;
  for (auto& item : filler.items) item = vb::apply_filler(item, vb::kEnglishFiller);
  vb::write_dataset(filler, tmp.str("out/datasets/keys__english_filler_text.jsonl"));

  vb::ResponseSet rs;
  rs.manifest.endpoint_url = "http://127.0.0.1:1/v1/completions";
  rs.manifest.model = "toy";
  rs.manifest.dataset_name = "keys";
  rs.manifest.dataset_path = tmp.str("keys.jsonl");
  rs.manifest.dataset_hash = vb::dataset_content_hash(keys);
  rs.manifest.attack = "original";
  rs.records = {ok("q0", " A", {-0.1, -2, -3, -4}), ok("q1", " B", {-0.5, -0.9, -3, -4}),
                ok("q2", " C", {-3, -2, -0.1, -4}), ok("q3", "The", {-1, -2, -3, M}),
                ok("q4", "The", {M, -5, -4, -1}),   ok("q5", "The", {M, M, M, M})};
  vb::save_response_set(rs, tmp.str("out/responses/keys__original.jsonl"));
  if (original_out) *original_out = rs;

  vb::ResponseSet fs = rs;
  fs.manifest.attack = "english_filler_text";
  fs.manifest.dataset_path = "datasets/keys__english_filler_text.jsonl";
  fs.manifest.dataset_hash = vb::dataset_content_hash(filler);
  fs.records.clear();
  for (int i = 0; i < 6; ++i) {
    const std::string said = i % 2 ? " D" : " A";
    fs.records.push_back(ok("q" + std::to_string(i), said, {i % 2 ? -3.0 : -0.1, -2, -2, i % 2 ? -0.1 : -3.0}));
  }
  fs.records.push_back({"q9", std::nullopt, "Transport", "lost"});
  fs.records.pop_back();  // ids must stay inside the dataset
  vb::save_response_set(fs, tmp.str("out/responses/keys__english_filler_text.jsonl"));
}

TEST_F(Workspace, ScoreMatchesFrozenTables) {
  write_score_fixture(tmp);
  const auto cfg = config({{"datasets", {{"keys", "keys.jsonl"}}},
                           {"attacks", {"original", "english_filler_text"}}});
  ASSERT_EQ(vb::run_command("score", cfg, svc), 0) << log.str();
  expect_golden(vb::read_file_bytes(tmp.str("out/scores/scores.md")), "scores.md");
  expect_golden(vb::read_file_bytes(tmp.str("out/scores/scores.csv")), "scores.csv");
  const auto rows = vb::load_score_rows(tmp.path() / "out/scores/scores.json");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].attack, "original");  // config order, not file order
  EXPECT_EQ(rows[0].acc, vb::Rational(1, 6));
  EXPECT_EQ(rows[1].acc_logits_wrong, std::nullopt);
}

TEST_F(Workspace, ScoreExitsFiveOnTamperedResponses) {
  vb::ResponseSet rs;
  write_score_fixture(tmp, &rs);
  rs.records[2].response->answer = 0;  // token " C" recorded as answer A
  vb::save_response_set(rs, tmp.str("out/responses/keys__original.jsonl"));
  const auto cfg = config({{"datasets", {{"keys", "keys.jsonl"}}}});
  EXPECT_EQ(vb::run_command("score", cfg, svc), vb::kExitIdentity);
  EXPECT_NE(log.str().find("IdentityViolation"), std::string::npos);
}

TEST_F(Workspace, ScoreExitsFiveWhenKeysChanged) {
  write_score_fixture(tmp);
  auto keys = vb::load_dataset(tmp.str("keys.jsonl"));
  keys.items[0].answer_index = 1;
  vb::write_dataset(keys, tmp.str("keys.jsonl"));
  const auto cfg = config({{"datasets", {{"keys", "keys.jsonl"}}}});
  EXPECT_EQ(vb::run_command("score", cfg, svc), vb::kExitIdentity);
}

TEST_F(Workspace, ScoreWithoutResponsesIsAConfigError) {
  write_dataset("keys.jsonl", vb::testing::synthetic_dataset(3, 1));
  const auto cfg = config({{"datasets", {{"keys", "keys.jsonl"}}}});
  EXPECT_EQ(vb::run_command("score", cfg, svc), vb::kExitConfig);
}

TEST_F(Workspace, ReportWithNothingExitsSix) {
  write_dataset("keys.jsonl", vb::testing::synthetic_dataset(3, 1));
  const auto cfg = config({{"datasets", {{"keys", "keys.jsonl"}}}});
  EXPECT_EQ(vb::run_command("report", cfg, svc), vb::kExitEmptyReport);
}

TEST_F(Workspace, ReportWritesTablesAndCharts) {
  write_score_fixture(tmp);
  const auto cfg = config({{"datasets", {{"keys", "keys.jsonl"}}},
                           {"attacks", {"original", "english_filler_text"}}});
  ASSERT_EQ(vb::run_command("score", cfg, svc), 0);
  ASSERT_EQ(vb::run_command("report", cfg, svc), 0) << log.str();
  for (const char* f : {"report.md", "table.csv", "table.md", "output_score.svg",
                        "logit_accuracy.svg", "adjusted_accuracy.svg"}) {
    EXPECT_TRUE(std::filesystem::exists(tmp.path() / "out/report" / f)) << f;
  }
  EXPECT_EQ(vb::read_file_bytes(tmp.str("out/report/table.csv")),
            vb::read_file_bytes(tmp.str("out/scores/scores.csv")));
}

// --- evaluate / transform ---------------------------------------------------

nlohmann::json eval_config(const MockServer& server, nlohmann::json extra = {}) {
  nlohmann::json j = {{"datasets", {{"bio", "bio.jsonl"}}},
                      {"eval_endpoint", {{"url", server.url("/v1/completions")},
                                         {"model", "toy"},
                                         {"parallelism", 2}}},
                      {"retry", {{"attempts", 2}, {"base_delay_ms", 0}}},
                      {"reproducible", true}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

TEST_F(Workspace, EvaluateResumeSkipsFinishedItems) {
  const auto d = vb::testing::synthetic_dataset(10, 4, "bio");
  write_dataset("bio.jsonl", d);
  MockServer server;
  vb::testing::serve_script(server, vb::testing::script_replies(d, {10, 6, 3, 4, 2}));
  server.start();
  const auto cfg = config(eval_config(server));
  ASSERT_EQ(vb::run_command("evaluate", cfg, svc), 0) << log.str();
  EXPECT_EQ(server.count("/v1/completions"), 10u);
  const auto first = vb::read_file_bytes(tmp.str("out/responses/bio__original.jsonl"));
  ASSERT_EQ(vb::run_command("evaluate", cfg, svc, {true}), 0);
  EXPECT_EQ(server.count("/v1/completions"), 10u);
  EXPECT_EQ(vb::read_file_bytes(tmp.str("out/responses/bio__original.jsonl")), first);
}

TEST_F(Workspace, EvaluateExitCodes) {
  const auto d = vb::testing::synthetic_dataset(6, 4, "bio");
  write_dataset("bio.jsonl", d);
  MockServer server;
  server.route("/v1/completions", [](const nlohmann::json& req) {
    const auto tag = vb::testing::last_tag(req.value("prompt", ""));
    if (tag == "q00002") return MockReply{500, {{"error", "boom"}}};
    return MockReply{200, vb::testing::completion_json(" A", {{" A", -0.1}})};
  });
  server.start();
  EXPECT_EQ(vb::run_command("evaluate", config(eval_config(server)), svc), vb::kExitPartial);

  MockServer down;
  down.route("/v1/completions", [](const nlohmann::json&) {
    return MockReply{503, {{"error", "unavailable"}}};
  });
  down.start();
  EXPECT_EQ(vb::run_command("evaluate", config(eval_config(down)), svc), vb::kExitEndpoint);

  MockServer no_logprobs;
  no_logprobs.route("/v1/completions", [](const nlohmann::json&) {
    return MockReply{200, {{"choices", {{{"text", "A"}}}}}};
  });
  no_logprobs.start();
  EXPECT_EQ(vb::run_command("evaluate", config(eval_config(no_logprobs)), svc), vb::kExitEndpoint);
}

TEST_F(Workspace, EvaluateNeedsTransformedDatasets) {
  write_dataset("bio.jsonl", vb::testing::synthetic_dataset(3, 4, "bio"));
  MockServer server;
  server.route("/v1/completions", [](const nlohmann::json&) {
    return MockReply{200, vb::testing::completion_json(" A", {{" A", -0.1}})};
  });
  server.start();
  const auto cfg = config(eval_config(server, {{"attacks", {"original", "latin_filler_text"}}}));
  EXPECT_EQ(vb::run_command("evaluate", cfg, svc), vb::kExitConfig);
  EXPECT_NE(log.str().find("run transform first"), std::string::npos);
}

TEST_F(Workspace, TransformReportsPartialFailures) {
  write_dataset("bio.jsonl", vb::testing::synthetic_dataset(5, 4, "bio"));
  MockServer server;
  server.route("/v1/chat/completions", [](const nlohmann::json& req) {
    const auto text = req["messages"][0]["content"].get<std::string>();
    if (vb::testing::last_tag(text) == "q00001") return MockReply{502, {{"error", "bad gateway"}}};
    return MockReply{200, vb::testing::chat_json("poem for " + vb::testing::last_tag(text))};
  });
  server.start();
  const auto cfg = config(
      {{"datasets", {{"bio", "bio.jsonl"}}},
       {"attacks", {"original", "english_filler_text", "rephrased_poem"}},
       {"rephraser_endpoint", {{"url", server.url("/v1/chat/completions")}, {"model", "r"}}},
       {"retry", {{"attempts", 2}, {"base_delay_ms", 0}}}});
  EXPECT_EQ(vb::run_command("transform", cfg, svc), vb::kExitPartial);
  const auto poem = vb::load_dataset(tmp.str("out/datasets/bio__rephrased_poem.jsonl"));
  EXPECT_EQ(poem.items.size(), 4u);
  const auto sidecar = nlohmann::json::parse(
      vb::read_file_bytes(tmp.str("out/datasets/bio__rephrased_poem.report.json")));
  ASSERT_EQ(sidecar["failed"].size(), 1u);
  EXPECT_EQ(sidecar["failed"][0]["id"], "q00001");
  EXPECT_EQ(sidecar["failed"][0]["status"], 502);
  const auto filler = vb::load_dataset(tmp.str("out/datasets/bio__english_filler_text.jsonl"));
  EXPECT_EQ(filler.items.size(), 5u);

  // Second run: successes come from the cache, only the failure is retried.
  const auto before = server.count("/v1/chat/completions");
  EXPECT_EQ(vb::run_command("transform", cfg, svc), vb::kExitPartial);
  EXPECT_EQ(server.count("/v1/chat/completions") - before, 2u);
}

// --- CLI --------------------------------------------------------------------

TEST_F(Workspace, CliExitCodes) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("bogus"), vb::kExitConfig);
  EXPECT_EQ(run_cli("score --config " + tmp.str("missing.json")), vb::kExitConfig);
  vb::write_text_file(tmp.str("bad.json"), "{not json");
  EXPECT_EQ(run_cli("score --config " + tmp.str("bad.json")), vb::kExitConfig);

  write_score_fixture(tmp);
  vb::write_text_file(tmp.str("ok.json"),
                      R"({"datasets":{"keys":"keys.jsonl"},"output_dir":"out"})");
  EXPECT_EQ(run_cli("score --config " + tmp.str("ok.json")), 0);
  EXPECT_EQ(run_cli("report --config " + tmp.str("ok.json") + " --out " + tmp.str("elsewhere")),
            vb::kExitEmptyReport);
}

}  // namespace
