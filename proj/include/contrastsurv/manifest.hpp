#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "contrastsurv/error.hpp"
#include "contrastsurv/version.hpp"

#include <nlohmann/json.hpp>

namespace contrastsurv {

inline std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(digest_len * 2);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& data) {
  return sha256_hex(data.data(), data.size());
}

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file for digest: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string content = ss.str();
  return sha256_hex(content);
}

// Reproducibility record written before any other output artifact.
struct RunManifest {
  std::string command;
  nlohmann::json config;                          // resolved configuration
  std::vector<std::pair<std::string, std::string>> input_digests;  // path, sha256
  std::uint64_t seed = 0;
  std::vector<std::string> output_paths;

  nlohmann::json to_json() const {
    nlohmann::json inputs = nlohmann::json::array();
    for (const auto& [path, digest] : input_digests)
      inputs.push_back({{"path", path}, {"sha256", digest}});
    return nlohmann::json{{"command", command},       {"config", config},
                          {"inputs", inputs},         {"seed", seed},
                          {"outputs", output_paths},  {"toolkit_version", kVersion},
                          {"digest_algorithm", "SHA-256"}};
  }
};

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  out << content;
  if (!out) throw Error("write failed: " + path);
}

inline void write_manifest(const RunManifest& manifest, const std::string& path) {
  write_text_file(path, manifest.to_json().dump(2) + "\n");
}

}  // namespace contrastsurv
