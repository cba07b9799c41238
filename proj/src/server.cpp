#include "voxlrp/server.hpp"

#include <charconv>

#include <httplib.h>

#include "voxlrp/error.hpp"
#include "voxlrp/lrp.hpp"
#include "voxlrp/pipeline.hpp"

namespace voxlrp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ApiResponse error(int status, const std::string& message) {
  return {status, json{{"code", status}, {"message", message}}.dump()};
}

ApiResponse ok(const json& j) { return {200, j.dump()}; }

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < path.size()) {
    const std::size_t j = path.find('/', i);
    const std::size_t end = j == std::string::npos ? path.size() : j;
    if (end > i) parts.push_back(path.substr(i, end - i));
    i = end + 1;
  }
  return parts;
}

bool parse_axis(const std::string& s, Axis& axis) {
  if (s == "sagittal") axis = Axis::Sagittal;
  else if (s == "coronal") axis = Axis::Coronal;
  else if (s == "axial") axis = Axis::Axial;
  else return false;
  return true;
}

bool parse_size(const std::string& s, std::size_t& v) {
  if (s.empty()) return false;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

std::string param(const std::map<std::string, std::string>& q, const std::string& key, const std::string& fallback = "") {
  const auto it = q.find(key);
  return it == q.end() ? fallback : it->second;
}

// Plane of `v` as (w, h, values[row * w + col]).
json plane(const Volume3D& v, Axis axis, std::size_t index) {
  const Dims d = v.dims();
  std::size_t w = 0, h = 0;
  json values = json::array();
  switch (axis) {
    case Axis::Sagittal:
      w = d.ny, h = d.nz;
      for (std::size_t z = 0; z < h; ++z)
        for (std::size_t y = 0; y < w; ++y) values.push_back(v.at(index, y, z));
      break;
    case Axis::Coronal:
      w = d.nx, h = d.nz;
      for (std::size_t z = 0; z < h; ++z)
        for (std::size_t x = 0; x < w; ++x) values.push_back(v.at(x, index, z));
      break;
    case Axis::Axial:
      w = d.nx, h = d.ny;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) values.push_back(v.at(x, y, index));
      break;
  }
  return json{{"dims", {w, h}}, {"values", std::move(values)}};
}

std::pair<double, double> min_max(const Volume3D& v) {
  if (v.size() == 0) return {0.0, 0.0};
  float lo = v[0], hi = v[0];
  for (float x : v.values()) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  return {lo, hi};
}

}  // namespace

ApiService::ApiService(const fs::path& out, const fs::path& manifest) : out_(out), manifest_(load_manifest(manifest)) {
  const fs::path idx = out_ / "explain" / "index.json";
  if (fs::exists(idx)) {
    try {
      index_ = json::parse(read_text_file(idx));
    } catch (const json::exception& e) {
      fail(ErrorCode::Schema, idx.string() + ": " + e.what());
    }
  }
}

ApiResponse ApiService::get(const std::string& path, const std::map<std::string, std::string>& query) const {
  const auto p = split_path(path);
  try {
    if (p.size() == 1 && p[0] == "subjects") return subjects();
    if (p.size() == 1 && p[0] == "models") return models();
    if (p.size() == 5 && p[0] == "subjects" && p[2] == "slice") return slice(p[1], p[3], p[4], query);
    if (p.size() == 3 && p[0] == "subjects" && p[2] == "histogram") return histogram(p[1], query);
  } catch (const Error& e) {
    const int status = e.code() == ErrorCode::NotFound || e.code() == ErrorCode::Io ? 404 : 400;
    return error(status, e.what());
  }
  return error(404, "no such endpoint: " + path);
}

ApiResponse ApiService::subjects() const {
  json list = json::array();
  for (const auto& s : manifest_.subjects) {
    json j{{"id", s.id},
           {"label", to_string(s.label)},
           {"age", s.age},
           {"gender", s.gender == Gender::F ? "F" : "M"},
           {"tiv", s.tiv},
           {"field_strength", s.field_strength}};
    if (s.mmse) j["mmse"] = *s.mmse;
    list.push_back(j);
  }
  const Dims d = manifest_.dims;
  return ok(json{{"dims", {d.nx, d.ny, d.nz}}, {"subjects", list}});
}

ApiResponse ApiService::models() const {
  if (index_.is_null()) return ok(json{{"models", json::array()}, {"min_cluster", json::array()}});
  json list = json::array();
  for (const auto& m : index_.at("models")) {
    json e{{"id", m.at("id")}, {"aliases", m.at("aliases")}, {"source", m.at("source")}};
    if (m.contains("final_val_accuracy")) e["final_val_accuracy"] = m["final_val_accuracy"];
    if (m.contains("fold")) e["fold"] = m["fold"];
    list.push_back(e);
  }
  return ok(json{{"models", list},
                 {"min_cluster", index_.at("min_cluster")},
                 {"target_class", index_.at("target_class")},
                 {"subjects", index_.at("subjects")}});
}

namespace {

struct Resolved {
  Volume3D volume;
  json model = nullptr;
  std::size_t min_cluster = 0;
};

}  // namespace

static Resolved load_kind(const fs::path& out, const json& index, const std::string& id, const std::string& kind,
                          const std::map<std::string, std::string>& query, const DatasetManifest& manifest) {
  Resolved r;
  if (kind == "gray") {
    r.volume = manifest.load_volume(manifest.subject(id));
    return r;
  }
  if (kind == "residual") {
    const fs::path p = out / "residual" / "volumes" / (id + ".voxw");
    require(fs::exists(p), ErrorCode::NotFound, "no residual volume for " + id);
    r.volume = read_volume(p);
    return r;
  }
  require(kind == "relevance", ErrorCode::InvalidArgument, "kind must be gray, residual or relevance");
  require(!index.is_null() && !index.at("models").empty(), ErrorCode::NotFound, "no relevance maps");
  std::string model = param(query, "model");
  if (model.empty()) model = index.at("models").at(0).at("id").get<std::string>();
  bool known = false;
  for (const auto& m : index.at("models")) {
    if (m.at("id") == model) known = true;
    for (const auto& a : m.at("aliases")) {
      if (a == model && !known) {
        model = m.at("id").get<std::string>();
        known = true;
      }
    }
  }
  require(known, ErrorCode::NotFound, "unknown model " + model);
  const std::string mc = param(query, "min_cluster", "0");
  require(parse_size(mc, r.min_cluster), ErrorCode::InvalidArgument, "min_cluster must be a nonnegative integer");
  if (r.min_cluster != 0) {
    const auto sizes = index.at("min_cluster").get<std::vector<std::size_t>>();
    require(std::find(sizes.begin(), sizes.end(), r.min_cluster) != sizes.end(), ErrorCode::NotFound,
            "no cluster variant for min_cluster " + mc);
  }
  const fs::path p = relevance_path(out, model, id, r.min_cluster);
  require(fs::exists(p), ErrorCode::NotFound, "no relevance map for " + id + " under model " + model);
  r.volume = read_volume(p);
  r.model = model;
  return r;
}

ApiResponse ApiService::slice(const std::string& id, const std::string& axis_s, const std::string& index_s,
                              const std::map<std::string, std::string>& query) const {
  if (!manifest_.find(id)) return error(404, "unknown subject " + id);
  Axis axis;
  if (!parse_axis(axis_s, axis)) return error(400, "axis must be sagittal, coronal or axial");
  std::size_t index = 0;
  if (!parse_size(index_s, index)) return error(400, "slice index must be a nonnegative integer");
  const std::string kind = param(query, "kind", "gray");
  if (kind != "gray" && kind != "residual" && kind != "relevance") return error(400, "kind must be gray, residual or relevance");
  const Resolved r = load_kind(out_, index_, id, kind, query, manifest_);
  if (index >= r.volume.dims().extent(static_cast<int>(axis))) return error(404, "slice index out of range");
  json j = plane(r.volume, axis, index);
  const auto [lo, hi] = min_max(r.volume);
  j["subject"] = id;
  j["kind"] = kind;
  j["model"] = r.model;
  j["axis"] = axis_s;
  j["index"] = index;
  j["min_cluster"] = r.min_cluster;
  j["min"] = lo;
  j["max"] = hi;
  return ok(j);
}

ApiResponse ApiService::histogram(const std::string& id, const std::map<std::string, std::string>& query) const {
  if (!manifest_.find(id)) return error(404, "unknown subject " + id);
  const std::string axis_s = param(query, "axis", "coronal");
  Axis axis;
  if (!parse_axis(axis_s, axis)) return error(400, "axis must be sagittal, coronal or axial");
  const Resolved r = load_kind(out_, index_, id, "relevance", query, manifest_);
  const auto h = slice_histogram(r.volume, axis);
  const auto [lo, hi] = min_max(r.volume);
  const std::size_t best = static_cast<std::size_t>(std::max_element(h.begin(), h.end()) - h.begin());
  return ok(json{{"subject", id},
                 {"model", r.model},
                 {"axis", axis_s},
                 {"min_cluster", r.min_cluster},
                 {"histogram", h},
                 {"best_slice", best},
                 {"min", lo},
                 {"max", hi}});
}

struct HttpServer::Impl {
  const ApiService& api;
  httplib::Server server;
  explicit Impl(const ApiService& a) : api(a) {}
};

HttpServer::HttpServer(const ApiService& api) : impl_(std::make_unique<Impl>(api)) {
  impl_->server.Get(".*", [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> q;
    for (const auto& [k, v] : req.params) q.emplace(k, v);
    const ApiResponse r = impl_->api.get(req.path, q);
    res.status = r.status;
    res.set_content(r.body, "application/json");
    res.set_header("Access-Control-Allow-Origin", "*");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  require(bound > 0, ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace voxlrp
