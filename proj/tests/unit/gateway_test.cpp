#include "dialplan/remote_backend.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <thread>

using namespace dialplan;

namespace {

CompletionRequest ask(const std::string& text, int n = 1) {
  CompletionRequest r;
  r.system_prompt = "system";
  r.messages.push_back({"user", text});
  r.sample_count = n;
  return r;
}

RetryPolicy fast_retry(int attempts = 3) { return {attempts, std::chrono::milliseconds(0), 2.0}; }

class FlakyBackend final : public Backend {
 public:
  explicit FlakyBackend(int failures) : failures_(failures) {}
  std::string id() const override { return "flaky"; }
  std::vector<std::string> generate(const CompletionRequest& r) override {
    ++calls;
    if (calls <= failures_) throw TransportError("connection reset");
    return std::vector<std::string>(static_cast<std::size_t>(r.sample_count), "ok");
  }
  int calls = 0;

 private:
  int failures_;
};

}  // namespace

TEST(Request, ValidationRules) {
  auto r = ask("hi");
  EXPECT_NO_THROW(r.validate());
  r.sample_count = 0;
  EXPECT_THROW(r.validate(), Error);
  r = ask("hi");
  r.messages.push_back({"user", "again"});
  EXPECT_THROW(r.validate(), Error);
  r = ask("hi");
  r.messages[0].role = "system";
  EXPECT_THROW(r.validate(), Error);
  r = ask("hi");
  r.temperature = -1;
  EXPECT_THROW(r.validate(), Error);
}

TEST(Request, FingerprintIgnoresDecodingParameters) {
  auto a = ask("hi");
  auto b = ask("hi", 5);
  b.temperature = 0.0;
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), ask("hello").fingerprint());
}

TEST(Complete, RetriesTransportErrors) {
  FlakyBackend b(2);
  const auto c = complete(ask("x", 2), b, fast_retry(3));
  EXPECT_EQ(b.calls, 3);
  EXPECT_EQ(c.samples, (std::vector<std::string>{"ok", "ok"}));
  EXPECT_EQ(c.backend_id, "flaky");
}

TEST(Complete, GivesUpAfterMaxAttempts) {
  FlakyBackend b(10);
  try {
    complete(ask("x"), b, fast_retry(3));
    FAIL();
  } catch (const GatewayError& e) {
    EXPECT_EQ(e.code(), ErrorCode::Gateway);
    EXPECT_EQ(e.attempts(), 3);
  }
  EXPECT_EQ(b.calls, 3);
}

TEST(Complete, WrongSampleCountIsProtocolError) {
  CallbackBackend b("short", [](const CompletionRequest&, int) { return "x"; });
  class Short final : public Backend {
   public:
    std::string id() const override { return "short"; }
    std::vector<std::string> generate(const CompletionRequest&) override { return {"one"}; }
  } s;
  try {
    complete(ask("x", 3), s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Protocol);
  }
  EXPECT_EQ(complete(ask("x", 3), b).samples.size(), 3u);
}

TEST(Complete, InvalidRequestIsNotSent) {
  FlakyBackend b(0);
  auto r = ask("x");
  r.max_tokens = 0;
  EXPECT_THROW(complete(r, b), Error);
  EXPECT_EQ(b.calls, 0);
}

TEST(ScriptedBackend, RulesMatchInOrderWithCaptures) {
  const auto b = ScriptedBackend::from_json(nlohmann::json::parse(R"J({
    "rules": [
      {"when": "price", "pattern": "\\$(\\d+)", "reply": "It was $1"},
      {"when": "deal", "replies": ["Yes", "No"]}
    ],
    "default": "fallback"
  })J"));
  auto backend = b;
  EXPECT_EQ(backend.generate(ask("I pay $120 then $150. What price?")).front(), "It was 150");
  EXPECT_EQ(backend.generate(ask("What price?")).front(), "fallback");
  const auto votes = backend.generate(ask("Was there a deal?", 4));
  ASSERT_EQ(votes.size(), 4u);
  EXPECT_NE(votes[0], votes[1]);
  EXPECT_EQ(backend.generate(ask("Was there a deal?", 4)), votes);
  EXPECT_EQ(backend.generate(ask("unrelated")).front(), "fallback");
}

TEST(ScriptedBackend, RuleWithoutRepliesIsRejected) {
  EXPECT_THROW(ScriptedBackend({ScriptedRule{"x", "", {}}}, {}), Error);
  EXPECT_THROW(ScriptedBackend::from_file("/nonexistent/fixture.json"), Error);
}

TEST(Votes, ClassifierReadsLeadingWord) {
  EXPECT_EQ(classify_yes_no("Yes."), Vote::Yes);
  EXPECT_EQ(classify_yes_no("  \"no, they did not\""), Vote::No);
  EXPECT_EQ(classify_yes_no("YES"), Vote::Yes);
  EXPECT_EQ(classify_yes_no("Yesterday"), Vote::Abstain);
  EXPECT_EQ(classify_yes_no("Nothing"), Vote::Abstain);
  EXPECT_EQ(classify_yes_no("maybe"), Vote::Abstain);
}

TEST(Votes, StrictMajority) {
  EXPECT_TRUE(majority_vote({"Yes", "Yes", "No"}));
  EXPECT_FALSE(majority_vote({"Yes", "No"}));
  EXPECT_FALSE(majority_vote({"maybe", "unsure"}));
  EXPECT_TRUE(majority_vote({"Yes", "maybe", "unsure"}));
  EXPECT_THROW(majority_vote({}), Error);
  const auto t = tally_votes({"yes", "no", "hm", "yes"});
  EXPECT_EQ(t.yes, 2);
  EXPECT_EQ(t.no, 1);
  EXPECT_EQ(t.abstain, 1);
}

// ---------------------------------------------------------------------------
// Remote adapter against a local server

class RemoteBackendTest : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      last_body = nlohmann::json::parse(req.body);
      last_auth = req.get_header_value("Authorization");
      if (mode == "throttle" && hits == 1) {
        res.status = 429;
        return;
      }
      if (mode == "bad_request") {
        res.status = 400;
        res.set_content("{\"error\":\"bad\"}", "application/json");
        return;
      }
      if (mode == "garbage") {
        res.set_content("not json", "text/plain");
        return;
      }
      const int n = mode == "single" ? 1 : last_body.value("n", 1);
      nlohmann::json choices = nlohmann::json::array();
      for (int i = 0; i < n; ++i) choices.push_back({{"message", {{"role", "assistant"}, {"content", "reply " + std::to_string(i)}}}});
      res.set_content(nlohmann::json{{"choices", choices}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void TearDown() override {
    server_.stop();
    thread_.join();
  }

  RemoteChatBackend backend() {
    RemoteBackendConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/";
    cfg.api_key = "secret";
    cfg.model = "test-model";
    cfg.timeout = std::chrono::seconds(5);
    cfg.min_interval = std::chrono::milliseconds(0);
    return RemoteChatBackend(cfg);
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> hits{0};
  nlohmann::json last_body;
  std::string last_auth;
  std::string mode = "normal";
};

TEST_F(RemoteBackendTest, SendsChatSchemaAndParsesChoices) {
  auto b = backend();
  auto r = ask("Hello", 3);
  r.messages.push_back({"assistant", "Hi"});
  r.messages.push_back({"user", "Deal?"});
  r.temperature = 1.0;
  r.max_tokens = 16;
  const auto c = complete(r, b);
  EXPECT_EQ(c.samples, (std::vector<std::string>{"reply 0", "reply 1", "reply 2"}));
  EXPECT_EQ(last_auth, "Bearer secret");
  EXPECT_EQ(last_body["model"], "test-model");
  EXPECT_EQ(last_body["n"], 3);
  EXPECT_EQ(last_body["max_tokens"], 16);
  ASSERT_EQ(last_body["messages"].size(), 4u);
  EXPECT_EQ(last_body["messages"][0]["role"], "system");
  EXPECT_EQ(last_body["messages"][0]["content"], "system");
  EXPECT_EQ(last_body["messages"][3]["content"], "Deal?");
  EXPECT_EQ(b.id(), "remote:test-model");
}

TEST_F(RemoteBackendTest, TopsUpWhenEndpointIgnoresN) {
  mode = "single";
  auto b = backend();
  const auto c = complete(ask("x", 3), b);
  EXPECT_EQ(c.samples.size(), 3u);
  EXPECT_EQ(hits.load(), 3);
}

TEST_F(RemoteBackendTest, ThrottleIsRetried) {
  mode = "throttle";
  auto b = backend();
  const auto c = complete(ask("x"), b, fast_retry(3));
  EXPECT_EQ(c.samples.size(), 1u);
  EXPECT_EQ(hits.load(), 2);
}

TEST_F(RemoteBackendTest, ClientErrorsAreProtocolErrors) {
  mode = "bad_request";
  auto b = backend();
  try {
    complete(ask("x"), b, fast_retry(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Protocol);
  }
  EXPECT_EQ(hits.load(), 1);
  mode = "garbage";
  EXPECT_THROW(complete(ask("x"), b, fast_retry(1)), Error);
}

TEST(RemoteBackend, UnreachableEndpointBecomesGatewayError) {
  RemoteBackendConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.timeout = std::chrono::seconds(1);
  cfg.min_interval = std::chrono::milliseconds(0);
  RemoteChatBackend b(cfg);
  try {
    complete(ask("x"), b, fast_retry(2));
    FAIL();
  } catch (const GatewayError& e) {
    EXPECT_EQ(e.attempts(), 2);
  }
}

TEST(RemoteBackend, ParseResponseRejectsMissingContent) {
  EXPECT_THROW(RemoteChatBackend::parse_response(R"({"choices":[{"message":{}}]})"), Error);
  EXPECT_THROW(RemoteChatBackend::parse_response(R"({"data":[]})"), Error);
  EXPECT_EQ(RemoteChatBackend::parse_response(R"({"choices":[{"message":{"content":"a"}}]})"),
            std::vector<std::string>{"a"});
}

TEST(RemoteBackend, ConfigFromEnvironment) {
  ::unsetenv("LLM_API_BASE");
  EXPECT_THROW(RemoteBackendConfig::from_env(), Error);
  ::setenv("LLM_API_BASE", "http://localhost:9", 1);
  ::setenv("LLM_API_KEY", "k", 1);
  const auto cfg = RemoteBackendConfig::from_env("m");
  EXPECT_EQ(cfg.base_url, "http://localhost:9");
  EXPECT_EQ(cfg.api_key, "k");
  EXPECT_EQ(cfg.model, "m");
  ::unsetenv("LLM_API_BASE");
  ::unsetenv("LLM_API_KEY");
}
