// Line-delimited JSON protocol for out-of-process scorers. The full message
// reference is docs/protocol.md.

#include <csignal>
#include <cerrno>
#include <cstring>
#include <istream>
#include <ostream>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>

#include "dlgresp/scoring.hpp"

namespace dlgresp {

using nlohmann::json;

namespace {

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw BackendError(fmt::format("proto: write to scorer failed: {}", std::strerror(errno)));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

json error_response(std::string_view code, std::string_view message) {
  return json{{"error", code}, {"message", message}};
}

std::vector<Auxiliary> candidates_from(const json& request) {
  std::vector<Auxiliary> out;
  if (request.contains("candidates")) {
    for (const auto& c : request.at("candidates")) out.emplace_back(c.get<std::string>());
  }
  return out;
}

}  // namespace

ProtoBackend::ProtoBackend(const std::string& command) {
  std::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2];   // parent -> child
  int out_pipe[2];  // child -> parent
  if (::pipe(in_pipe) != 0) throw BackendError("proto: pipe() failed");
  if (::pipe(out_pipe) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw BackendError("proto: pipe() failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw BackendError("proto: fork() failed");
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  ::fcntl(in_pipe[1], F_SETFD, FD_CLOEXEC);
  ::fcntl(out_pipe[0], F_SETFD, FD_CLOEXEC);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];

  try {
    const json hello = call(json{{"op", "hello"}, {"schema_version", kSchemaVersion}});
    model_id_ = hello.at("model_id").get<std::string>();
    capabilities_ = Capabilities::from_names(hello.at("capabilities").get<std::vector<std::string>>());
    const auto style = hello.value("style", std::string("masked"));
    if (style == "masked") style_ = ModelStyle::masked;
    else if (style == "causal") style_ = ModelStyle::causal;
    else throw BackendError(fmt::format("proto: unknown model style \"{}\"", style));
  } catch (const json::exception& e) {
    throw BackendError(fmt::format("proto: malformed hello response: {}", e.what()));
  }
}

ProtoBackend::~ProtoBackend() {
  if (to_child_ >= 0) {
    try {
      write_all(to_child_, json{{"op", "shutdown"}}.dump() + "\n");
    } catch (...) {
    }
    ::close(to_child_);
  }
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

json ProtoBackend::call(const json& request) {
  write_all(to_child_, request.dump() + "\n");
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      const std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (trim(line).empty()) continue;
      json response;
      try {
        response = json::parse(line);
      } catch (const json::exception& e) {
        throw BackendError(fmt::format("proto: unparseable response: {}", e.what()));
      }
      if (response.contains("error")) {
        const auto code = response.at("error").get<std::string>();
        const auto message = response.value("message", std::string{});
        if (code == "multi_token_candidate") throw MultiTokenCandidate("proto: " + message);
        if (code == "unsupported") throw UnsupportedCapability("proto: " + message);
        throw BackendError(fmt::format("proto: scorer error {}: {}", code, message));
      }
      return response;
    }
    char chunk[65536];
    const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw BackendError(fmt::format("proto: read failed: {}", std::strerror(errno)));
    }
    if (n == 0) throw BackendError("proto: scorer process closed its output");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

SequenceScore ProtoBackend::sequence_logprob(const ScoreRequest& request) {
  if (!capabilities_.has(Capability::sequence_logprob)) unsupported(Capability::sequence_logprob);
  const json r = call(json{{"op", "sequence"},
                           {"item_id", request.item_id},
                           {"variant", request.variant},
                           {"text", request.text}});
  try {
    return SequenceScore{r.at("total").get<double>(), r.at("n_tokens").get<int>()};
  } catch (const json::exception& e) {
    throw BackendError(fmt::format("proto: malformed sequence response: {}", e.what()));
  }
}

CandidateLogprobs ProtoBackend::masked_candidates(const ScoreRequest& request) {
  if (!capabilities_.has(Capability::masked_candidates)) unsupported(Capability::masked_candidates);
  json candidates = json::array();
  for (const auto& c : request.candidates) candidates.push_back(c.surface());
  const json r = call(json{{"op", "masked"},
                           {"item_id", request.item_id},
                           {"variant", request.variant},
                           {"masked_text", request.masked_text},
                           {"candidates", std::move(candidates)}});
  try {
    CandidateLogprobs out;
    for (const auto& [aux, v] : r.at("logprobs").items()) out[Auxiliary(aux)] = v.get<double>();
    return out;
  } catch (const json::exception& e) {
    throw BackendError(fmt::format("proto: malformed masked response: {}", e.what()));
  }
}

std::vector<TokenEmbedding> ProtoBackend::embeddings(const ScoreRequest& request) {
  if (!capabilities_.has(Capability::embeddings)) unsupported(Capability::embeddings);
  const json r = call(json{{"op", "embed"},
                           {"item_id", request.item_id},
                           {"variant", request.variant},
                           {"text", request.text},
                           {"want_embeddings", true}});
  try {
    std::vector<TokenEmbedding> out;
    for (const auto& e : r.at("embeddings")) {
      TokenEmbedding te;
      te.token.text = e.value("token", std::string{});
      te.token.begin = e.at("start").get<std::size_t>();
      te.token.end = e.at("end").get<std::size_t>();
      te.vector = e.at("vector").get<std::vector<float>>();
      out.push_back(std::move(te));
    }
    return out;
  } catch (const json::exception& e) {
    throw BackendError(fmt::format("proto: malformed embed response: {}", e.what()));
  }
}

json handle_protocol_request(ScorerBackend& backend, const json& request) {
  try {
    const auto op = request.at("op").get<std::string>();
    ScoreRequest req;
    req.item_id = request.value("item_id", std::string{});
    req.variant = request.value("variant", std::string{});
    req.text = request.value("text", std::string{});
    req.masked_text = request.value("masked_text", std::string{});
    req.candidates = candidates_from(request);

    if (op == "hello") {
      return json{{"model_id", backend.model_id()},
                  {"capabilities", backend.capabilities().names()},
                  {"style", to_string(backend.style())},
                  {"concurrent", backend.concurrent_safe()},
                  {"schema_version", kSchemaVersion}};
    }
    if (op == "sequence") {
      const auto s = backend.sequence_logprob(req);
      return json{{"total", s.total}, {"n_tokens", s.n_tokens}};
    }
    if (op == "masked") {
      const auto scores = masked_candidate_logprobs(backend, req.masked_text, req.candidates);
      json lp = json::object();
      for (const auto& [aux, v] : scores) lp[aux.surface()] = v;
      return json{{"logprobs", std::move(lp)}};
    }
    if (op == "embed") {
      json arr = json::array();
      for (const auto& e : backend.embeddings(req)) {
        arr.push_back(json{{"token", e.token.text},
                           {"start", e.token.begin},
                           {"end", e.token.end},
                           {"vector", e.vector}});
      }
      return json{{"embeddings", std::move(arr)}};
    }
    return error_response("bad_request", fmt::format("unknown op \"{}\"", op));
  } catch (const MultiTokenCandidate& e) {
    return error_response("multi_token_candidate", e.what());
  } catch (const UnsupportedCapability& e) {
    return error_response("unsupported", e.what());
  } catch (const json::exception& e) {
    return error_response("bad_request", e.what());
  } catch (const std::exception& e) {
    return error_response("backend_error", e.what());
  }
}

std::size_t serve_protocol(ScorerBackend& backend, std::istream& in, std::ostream& out) {
  std::size_t served = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    json request;
    try {
      request = json::parse(line);
    } catch (const json::exception& e) {
      out << error_response("bad_request", e.what()).dump() << '\n' << std::flush;
      continue;
    }
    if (request.value("op", std::string{}) == "shutdown") break;
    out << handle_protocol_request(backend, request).dump() << '\n' << std::flush;
    ++served;
  }
  return served;
}

}  // namespace dlgresp
