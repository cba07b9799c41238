#include <doctest.h>

#include <chrono>
#include <cmath>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "support.hpp"
#include "tiny_pipeline.hpp"
#include "voxlrp/server.hpp"

using namespace voxlrp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path& pipeline_out() {
  static testing::TempDir dir;
  static const bool ran = (testing::run_tiny_pipeline(dir.path()), true);
  (void)ran;
  return dir.path();
}

const ApiService& api() {
  static const ApiService s(pipeline_out(), pipeline_out() / "cohort" / "manifest.json");
  return s;
}

json body(const ApiResponse& r) { return json::parse(r.body); }

}  // namespace

TEST_SUITE("server") {

TEST_CASE("subjects and models") {
  const auto r = api().get("/subjects");
  REQUIRE(r.status == 200);
  const json j = body(r);
  CHECK(j["dims"] == json{16, 16, 16});
  CHECK(j["subjects"].size() == api().manifest().subjects.size());
  CHECK(j["subjects"][0]["id"] == api().manifest().subjects[0].id);
  for (const auto& s : j["subjects"]) CHECK((s["gender"] == "F" || s["gender"] == "M"));

  const json m = body(api().get("/models"));
  CHECK(m["min_cluster"] == json{2, 8});
  CHECK(m["target_class"] == 1);
  CHECK(!m["models"].empty());
  for (const auto& e : m["models"]) CHECK(e.contains("source"));
}

TEST_CASE("slices equal the on-disk planes") {
  const auto& man = api().manifest();
  const auto& s = man.subjects[5];
  const Volume3D gray = man.load_volume(s);
  const json a = body(api().get("/subjects/" + s.id + "/slice/axial/7"));
  CHECK(a["dims"] == json{16, 16});
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) CHECK(a["values"][y * 16 + x].get<float>() == gray.at(x, y, 7));
  const json sg = body(api().get("/subjects/" + s.id + "/slice/sagittal/3"));
  for (std::size_t z = 0; z < 16; ++z)
    for (std::size_t y = 0; y < 16; ++y) CHECK(sg["values"][z * 16 + y].get<float>() == gray.at(3, y, z));

  const std::string model = body(api().get("/models"))["models"][0]["id"];
  const Volume3D rel = read_volume(relevance_path(pipeline_out(), model, s.id, 8));
  const json c = body(api().get("/subjects/" + s.id + "/slice/coronal/9", {{"kind", "relevance"}, {"min_cluster", "8"}}));
  CHECK(c["model"] == model);
  for (std::size_t z = 0; z < 16; ++z)
    for (std::size_t x = 0; x < 16; ++x) CHECK(c["values"][z * 16 + x].get<float>() == rel.at(x, 9, z));
  float lo = rel[0], hi = rel[0];
  for (float v : rel.values()) lo = std::min(lo, v), hi = std::max(hi, v);
  CHECK(c["min"].get<float>() == lo);
  CHECK(c["max"].get<float>() == hi);

  const Volume3D res = read_volume(pipeline_out() / "residual" / "volumes" / (s.id + ".voxw"));
  const json r = body(api().get("/subjects/" + s.id + "/slice/axial/0", {{"kind", "residual"}}));
  CHECK(r["values"][17].get<float>() == res.at(1, 1, 0));
}

TEST_CASE("histogram sums the slices") {
  const std::string id = api().manifest().subjects[2].id;
  for (const char* axis : {"sagittal", "coronal", "axial"}) {
    const json h = body(api().get("/subjects/" + id + "/histogram", {{"axis", axis}}));
    REQUIRE(h["histogram"].size() == 16);
    for (std::size_t i = 0; i < 16; ++i) {
      const json s = body(api().get("/subjects/" + id + "/slice/" + axis + "/" + std::to_string(i), {{"kind", "relevance"}}));
      double total = 0.0;
      for (const auto& v : s["values"]) total += v.get<double>();
      CHECK(h["histogram"][i].get<double>() == doctest::Approx(total).epsilon(1e-9));
    }
    const auto hist = h["histogram"].get<std::vector<double>>();
    CHECK(h["best_slice"] == std::size_t(std::max_element(hist.begin(), hist.end()) - hist.begin()));
  }
}

TEST_CASE("model aliases resolve") {
  const std::string id = api().manifest().subjects[0].id;
  const json best = body(api().get("/subjects/" + id + "/slice/axial/4", {{"kind", "relevance"}, {"model", "best"}}));
  const json f0 = body(api().get("/subjects/" + id + "/slice/axial/4", {{"kind", "relevance"}, {"model", "fold-00"}}));
  CHECK(best["model"] != nullptr);
  CHECK(f0["model"] == "fold-00");
}

TEST_CASE("errors") {
  const std::string id = api().manifest().subjects[0].id;
  auto status = [&](const std::string& path, std::map<std::string, std::string> q = {}) {
    const auto r = api().get(path, q);
    if (r.status != 200) {
      const json j = body(r);
      CHECK(j["code"] == r.status);
      CHECK(j["message"].is_string());
    }
    return r.status;
  };
  CHECK(status("/subjects/" + id + "/slice/axial/16") == 404);
  CHECK(status("/subjects/" + id + "/slice/axial/15") == 200);
  CHECK(status("/subjects/" + id + "/slice/oblique/3") == 400);
  CHECK(status("/subjects/" + id + "/slice/axial/-1") == 400);
  CHECK(status("/subjects/" + id + "/slice/axial/x") == 400);
  CHECK(status("/subjects/nobody/slice/axial/1") == 404);
  CHECK(status("/subjects/" + id + "/slice/axial/1", {{"kind", "t1"}}) == 400);
  CHECK(status("/subjects/" + id + "/slice/axial/1", {{"kind", "relevance"}, {"model", "fold-09"}}) == 404);
  CHECK(status("/subjects/" + id + "/slice/axial/1", {{"kind", "relevance"}, {"min_cluster", "5"}}) == 404);
  CHECK(status("/subjects/" + id + "/slice/axial/1", {{"kind", "relevance"}, {"min_cluster", "abc"}}) == 400);
  CHECK(status("/subjects/" + id + "/histogram", {{"axis", "up"}}) == 400);
  CHECK(status("/nothing") == 404);
}

TEST_CASE("repeated requests are identical and read-only") {
  const auto before = testing::tree_bytes(pipeline_out(), false);
  const std::string id = api().manifest().subjects[1].id;
  const std::string path = "/subjects/" + id + "/slice/coronal/5";
  const auto a = api().get(path, {{"kind", "relevance"}});
  for (int i = 0; i < 3; ++i) CHECK(api().get(path, {{"kind", "relevance"}}).body == a.body);
  CHECK(api().get("/models").body == api().get("/models").body);
  CHECK(testing::tree_bytes(pipeline_out(), false) == before);
}

TEST_CASE("service without explain output") {
  testing::TempDir tmp;
  auto c = config_from_json(testing::tiny_config_json(tmp.path()));
  c.synth.n_subjects = 4;
  run_synth(c);
  const ApiService s(tmp.path(), c.manifest_path());
  CHECK(body(s.get("/subjects"))["subjects"].size() == 4);
  CHECK(body(s.get("/models"))["models"].empty());
  const std::string id = s.manifest().subjects[0].id;
  CHECK(s.get("/subjects/" + id + "/slice/axial/0").status == 200);
  CHECK(s.get("/subjects/" + id + "/slice/axial/0", {{"kind", "relevance"}}).status == 404);
  CHECK(s.get("/subjects/" + id + "/slice/axial/0", {{"kind", "residual"}}).status == 404);
}

TEST_CASE("http round trip") {
  HttpServer server(api());
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread t([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);
  cli.set_connection_timeout(5);
  std::shared_ptr<httplib::Response> res;
  for (int i = 0; i < 50 && !res; ++i) {
    res = std::shared_ptr<httplib::Response>(nullptr);
    if (auto r = cli.Get("/subjects")) res = std::make_shared<httplib::Response>(*r);
    else std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->body == api().get("/subjects").body);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  const std::string id = api().manifest().subjects[0].id;
  auto r = cli.Get("/subjects/" + id + "/slice/coronal/2?kind=relevance&min_cluster=2");
  REQUIRE(r);
  CHECK(r->body == api().get("/subjects/" + id + "/slice/coronal/2", {{"kind", "relevance"}, {"min_cluster", "2"}}).body);
  r = cli.Get("/subjects/" + id + "/slice/coronal/99");
  REQUIRE(r);
  CHECK(r->status == 404);
  server.stop();
  t.join();
}

}
