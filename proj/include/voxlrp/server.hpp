#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxlrp/dataset.hpp"

namespace voxlrp {

struct ApiResponse {
  int status = 200;
  std::string body;  // JSON
};

// Read-only view over a pipeline output directory.
//
//   GET /subjects
//   GET /models
//   GET /subjects/{id}/slice/{axis}/{index}?kind=gray|residual|relevance&model=&min_cluster=
//   GET /subjects/{id}/histogram?model=&axis=&min_cluster=
//
// axis is sagittal, coronal or axial. A slice is {dims: [w, h], values: [...]} with
// values[row * w + col]: sagittal planes are (y, z), coronal (x, z), axial (x, y).
// min/max always describe the whole volume the slice came from. Errors are
// {code, message} with status 400 or 404.
class ApiService {
 public:
  ApiService(const std::filesystem::path& out, const std::filesystem::path& manifest);

  ApiResponse get(const std::string& path, const std::map<std::string, std::string>& query = {}) const;

  const DatasetManifest& manifest() const { return manifest_; }

 private:
  ApiResponse subjects() const;
  ApiResponse models() const;
  ApiResponse slice(const std::string& id, const std::string& axis, const std::string& index,
                    const std::map<std::string, std::string>& query) const;
  ApiResponse histogram(const std::string& id, const std::map<std::string, std::string>& query) const;

  std::filesystem::path out_;
  DatasetManifest manifest_;
  nlohmann::json index_;  // explain/index.json, or null
};

class HttpServer {
 public:
  explicit HttpServer(const ApiService& api);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Port 0 picks a free port; returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace voxlrp
