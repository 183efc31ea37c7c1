#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "dlgresp/lexicon.hpp"
#include "dlgresp/stimgen.hpp"

namespace testing {

// Fresh directory under the build tree, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("dlgresp-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

// The context of the running example: an ARC about French cuisine.
inline dlgresp::ContextSpec cuisine_context() {
  using namespace dlgresp;
  ContextSpec c;
  c.mode = Mode::arc;
  c.noun = "nurse";
  c.vp1 = VerbPhraseEntry{"has interest in French cuisine", Auxiliary("does")};
  c.vp2 = VerbPhraseEntry{"adopted a rescue dog", Auxiliary("did")};
  c.pair = VerbPair{Auxiliary("does"), Auxiliary("did")};
  c.index = 0;
  return c;
}

inline std::filesystem::path cli_path() {
  const char* p = std::getenv("DLGRESP_CLI");
  return p ? std::filesystem::path(p) : std::filesystem::path("dlgresp");
}

// Runs a shell command, returning its exit status.
inline int run_shell(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WEXITSTATUS(rc);
}

}  // namespace testing
