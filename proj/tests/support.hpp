#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "depthlens/dump_io.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "depthlens-XXXXXX").string();
    if (mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the depthlens binary; stdout and stderr are captured via files in `scratch`.
inline CliResult run_cli(const std::vector<std::string>& args, const fs::path& scratch,
                         const std::string& env = "") {
  std::string cmd = env.empty() ? "" : env + " ";
  cmd += quote(DEPTHLENS_CLI);
  for (const auto& a : args) cmd += " " + quote(a);
  const fs::path out = scratch / ".cli.out", err = scratch / ".cli.err";
  cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = depthlens::read_file(out);
  r.err = depthlens::read_file(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

}  // namespace testing
