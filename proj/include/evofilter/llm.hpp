// LLM-assisted mutation: prompts built from two sampled parent programs,
// a pluggable chat-completion backend (HTTP or scripted mock), and a
// total parser that harvests valid programs from raw completions.
#pragma once

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dsl.hpp"

namespace evofilter::llm {

struct blocklist_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct transport_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tokens that must never reach the model in anti-leak mode.
inline std::vector<std::string> default_blocklist() {
    return {"kalman", "filter", "covariance", "innovation", "estimat", "riccati", "bayes"};
}

struct PromptSpec {
    enum class Mode { AntiLeak, Descriptive };
    Mode mode = Mode::AntiLeak;
    dsl::Program parent_a;
    dsl::Program parent_b;
    dsl::Signature signature;
    std::size_t variants = 3;
    std::size_t max_tokens = 3000;
    std::string problem_description; // descriptive mode only
    std::vector<std::string> blocklist = default_blocklist();
};

namespace detail {

inline std::string to_lower(std::string s) {
    for (char& c : s)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::string signature_line(const dsl::Signature& sig) {
    std::string line = "fn f(";
    for (std::size_t i = 0; i < sig.inputs.size(); ++i)
        line += (i ? ", " : "") + sig.inputs[i];
    line += ") -> (";
    for (std::size_t i = 0; i < sig.outputs.size(); ++i)
        line += (i ? ", " : "") + sig.outputs[i];
    line += ")";
    return line;
}

inline const char* grammar_summary() {
    return "Language reference:\n"
           "- a program is:  fn NAME(in_1, ...) -> (out_1, ...) { statements }\n"
           "- each statement assigns a matrix expression to a name, e.g.  a = b @ c\n"
           "- operators: + (sum), - (difference), @ (matrix product), NUMBER * expr\n"
           "- functions: inv(A), tr(A), tanh(A), sin(A), cos(A), log(A), exp(A),\n"
           "  abs(A), square(A), maxs(A, number), rowmin(A), mean(A), norm(A), eye(n)\n"
           "- a name must be assigned before it is used; every output must be assigned\n";
}

} // namespace detail

/// Render the deterministic prompt. In anti-leak mode the rendered text
/// is checked against the blocklist and a violation raises.
inline std::string build_prompt(const PromptSpec& spec) {
    for (const dsl::Program* parent : {&spec.parent_a, &spec.parent_b}) {
        auto violations = dsl::validate(*parent, spec.signature);
        if (!violations.empty())
            throw domain_error("prompt parent does not match the signature: " +
                               violations.front().message);
    }

    std::string prompt;
    prompt += "You improve small programs written in a matrix expression language.\n\n";
    if (spec.mode == PromptSpec::Mode::Descriptive && !spec.problem_description.empty()) {
        prompt += "Problem context:\n";
        prompt += spec.problem_description;
        prompt += "\n\n";
    }
    prompt += detail::grammar_summary();
    prompt += "\nTwo of the best programs found so far:\n\n";
    prompt += "Program A:\n```\n" + dsl::print(spec.parent_a) + "```\n\n";
    prompt += "Program B:\n```\n" + dsl::print(spec.parent_b) + "```\n\n";
    prompt += "Write " + std::to_string(spec.variants) +
              " improved variants, combining and mutating the ideas above.\n";
    prompt += "Hard requirements:\n";
    prompt += "- keep exactly this first line: " + detail::signature_line(spec.signature) + "\n";
    prompt += "- every variant goes in its own fenced code block (```), nothing else inside\n";

    if (spec.mode == PromptSpec::Mode::AntiLeak) {
        const std::string lower = detail::to_lower(prompt);
        for (const auto& banned : spec.blocklist)
            if (lower.find(detail::to_lower(banned)) != std::string::npos)
                throw blocklist_error("anti-leak prompt contains blocked token '" + banned +
                                      "'");
    }
    return prompt;
}

// ---------------------------------------------------------------------------
// Backend

struct BackendConfig {
    std::string endpoint;  // http://host[:port]/path for live mode
    std::string mock_path; // JSON array of canned completion strings
    std::string model = "deepseek-r1-distill-qwen-14b";
    std::string auth_env = "EVOFILTER_API_TOKEN";
    int timeout_ms = 30000;
    int retries = 2;
    int backoff_ms = 250;

    void check() const {
        if (endpoint.empty() == mock_path.empty())
            throw domain_error("backend needs exactly one of endpoint or mock script");
    }
};

/// Chat-completion client. Mock mode replays a canned completion list
/// in order (cycling); live mode talks standard chat-completion JSON
/// over HTTP with bounded retries and exponential backoff.
class Backend {
public:
    explicit Backend(BackendConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.check();
        if (!cfg_.mock_path.empty()) {
            std::ifstream in(cfg_.mock_path);
            if (!in.good())
                throw transport_error("cannot open mock script " + cfg_.mock_path);
            nlohmann::json doc;
            try {
                in >> doc;
            } catch (const nlohmann::json::exception& e) {
                throw transport_error("mock script is not valid JSON: " + std::string(e.what()));
            }
            if (!doc.is_array() || doc.empty())
                throw transport_error("mock script must be a non-empty JSON array of strings");
            for (const auto& item : doc) {
                if (!item.is_string())
                    throw transport_error("mock script entries must be strings");
                canned_.push_back(item.get<std::string>());
            }
        }
    }

    bool is_mock() const { return !canned_.empty(); }

    std::string complete(const std::string& prompt, std::size_t max_tokens) {
        if (is_mock()) {
            const std::string& reply = canned_[next_ % canned_.size()];
            ++next_;
            return reply;
        }
        return complete_http(prompt, max_tokens);
    }

private:
    std::string complete_http(const std::string& prompt, std::size_t max_tokens) {
        std::string host;
        std::string path;
        split_endpoint(cfg_.endpoint, host, path);

        nlohmann::json request = {
            {"model", cfg_.model},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
            {"max_tokens", max_tokens},
        };
        const std::string body = request.dump();

        std::string last_error = "no attempt made";
        for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
            if (attempt > 0)
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(cfg_.backoff_ms * (1 << (attempt - 1))));
            httplib::Client client(host);
            client.set_connection_timeout(0, cfg_.timeout_ms * 1000);
            client.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
            httplib::Headers headers;
            if (const char* token = std::getenv(cfg_.auth_env.c_str()); token && *token)
                headers.emplace("Authorization", std::string("Bearer ") + token);

            auto res = client.Post(path, headers, body, "application/json");
            if (!res) {
                last_error = "transport failure: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status < 200 || res->status >= 300) {
                last_error = "HTTP status " + std::to_string(res->status);
                if (res->status >= 400 && res->status < 500 && res->status != 429)
                    break; // client errors will not improve on retry
                continue;
            }
            try {
                nlohmann::json doc = nlohmann::json::parse(res->body);
                return doc.at("choices").at(0).at("message").at("content").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                last_error = "malformed response: " + std::string(e.what());
            }
        }
        throw transport_error(last_error);
    }

    static void split_endpoint(const std::string& endpoint, std::string& host,
                               std::string& path) {
        const auto scheme = endpoint.find("://");
        if (scheme == std::string::npos)
            throw transport_error("endpoint must look like http://host[:port]/path");
        const auto path_start = endpoint.find('/', scheme + 3);
        if (path_start == std::string::npos) {
            host = endpoint;
            path = "/";
        } else {
            host = endpoint.substr(0, path_start);
            path = endpoint.substr(path_start);
        }
    }

    BackendConfig cfg_;
    std::vector<std::string> canned_;
    std::size_t next_ = 0;
};

// ---------------------------------------------------------------------------
// Completion parsing

struct ParsedCompletions {
    std::vector<dsl::Program> programs;
    std::vector<std::string> rejects; // reason per rejected block
};

/// Extract every fenced code block and keep the ones that parse and
/// validate against the signature. Total: garbage input comes back as
/// an empty list, never an exception.
inline ParsedCompletions parse_completions(const std::string& text, const dsl::Signature& sig,
                                           const dsl::GuardConfig& guards = {}) {
    ParsedCompletions out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t open = text.find("```", pos);
        if (open == std::string::npos)
            break;
        std::size_t content = text.find('\n', open + 3);
        if (content == std::string::npos)
            break; // fence with no content
        ++content;
        const std::size_t close = text.find("```", content);
        if (close == std::string::npos)
            break; // unterminated fence
        const std::string block = text.substr(content, close - content);
        pos = close + 3;

        try {
            dsl::Program p = dsl::parse(block);
            auto violations = dsl::validate(p, sig, guards);
            if (!violations.empty()) {
                out.rejects.push_back(violations.front().message);
                continue;
            }
            out.programs.push_back(std::move(p));
        } catch (const std::exception& e) {
            out.rejects.push_back(e.what());
        }
    }
    return out;
}

} // namespace evofilter::llm
