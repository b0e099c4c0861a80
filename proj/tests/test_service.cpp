#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "ov3d/binary_io.hpp"
#include "ov3d/error.hpp"
#include "ov3d/pipeline.hpp"
#include "ov3d/service_encoder.hpp"

using namespace ov3d;
namespace fs = std::filesystem;

namespace {

// Mean colour of the crop and one product term.
class MeanColorEncoder : public PatchEncoder {
 public:
  int feature_dim() const override { return 4; }
  Eigen::VectorXf encode(const Image& image, const CropRect& r) override {
    Eigen::VectorXf f = Eigen::VectorXf::Zero(4);
    for (int k = 0; k < 3; ++k)
      f(k) = image.rgb[static_cast<std::size_t>(k)].block(r.upper, r.left, r.lower - r.upper, r.right - r.left).mean();
    f(3) = f(0) * f(1) + 0.1f;
    return f;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Stand-in for the external process: answers every request file in `dir`.
// Crops narrower than `min_width` come back as NaN rows with an error entry.
class MockService {
 public:
  MockService(fs::path dir, int min_width = 0) : dir_(std::move(dir)), min_width_(min_width) {
    thread_ = std::jthread([this](std::stop_token st) { loop(st); });
  }
  int answered() const { return answered_; }

 private:
  void loop(std::stop_token st) {
    std::set<std::string> done;
    while (!st.stop_requested()) {
      for (const auto& e : fs::directory_iterator(dir_)) {
        if (e.path().extension() != ".json" || done.count(e.path().stem().string())) continue;
        done.insert(e.path().stem().string());
        answer(slurp(e.path()));
        ++answered_;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
  }

  void answer(const std::string& text) {
    if (text.find("\"texts\"") != std::string::npos) {
      const TextRequest t = parse_text_request(text);
      TextFeatureBank bank;
      bank.labels = t.texts;
      bank.features = Eigen::MatrixXf::Identity(static_cast<Eigen::Index>(t.texts.size()), 4);
      bank.features.col(3).setConstant(0.5f);
      auto tmp = dir_ / (t.request_id + ".part");
      write_text_bank(bank, tmp);
      fs::rename(tmp, dir_ / (t.request_id + ".ovtb"));
      return;
    }
    const CropRequest r = parse_crop_request(text);
    const Image img = read_image(r.image);
    EncodeResponse resp;
    resp.request_id = r.request_id;
    resp.features.resize(static_cast<Eigen::Index>(r.rectangles.size()), 4);
    for (std::size_t i = 0; i < r.rectangles.size(); ++i) {
      if (r.rectangles[i].right - r.rectangles[i].left < min_width_) {
        resp.features.row(static_cast<Eigen::Index>(i)).setConstant(NAN);
        resp.errors.emplace_back(static_cast<std::uint32_t>(i), "crop too narrow");
        continue;
      }
      resp.features.row(static_cast<Eigen::Index>(i)) = encoder_.encode(img, r.rectangles[i]).transpose();
    }
    write_atomically(dir_ / (r.request_id + ".bin"), serialize_response(resp));
  }

  fs::path dir_;
  int min_width_;
  MeanColorEncoder encoder_;
  std::atomic<int> answered_{0};
  std::jthread thread_;
};

// Pixel values on the 8-bit grid survive the PNG hand-off exactly.
Image test_image() {
  Image img(32, 32);
  img.id = "svc";
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      img.set_pixel(y, x, Eigen::Vector3f((x * 11 % 256) / 255.0f, (y * 7 % 256) / 255.0f, ((x + y) % 5) / 255.0f));
  return img;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("requests round trip through JSON") {
  CropRequest c{"req_1", "/tmp/a b.png", {{0, 1, 5, 6}, {2, 2, 4, 9}}};
  const CropRequest rc = parse_crop_request(to_json(c));
  CHECK(rc.request_id == c.request_id);
  CHECK(rc.image == c.image);
  REQUIRE(rc.rectangles.size() == 2);
  CHECK(rc.rectangles[1].lower == 9);
  TextRequest t{"req_2", {"a chair", "the \"quoted\" one"}};
  CHECK(parse_text_request(to_json(t)).texts == t.texts);
}

TEST_CASE("malformed requests are Format errors") {
  const char* bad_crops[] = {
      "{",
      R"({"image": "x", "rectangles": []})",
      R"({"request_id": "", "image": "x", "rectangles": []})",
      R"({"request_id": "r", "image": "x", "rectangles": [[0, 0, 1]]})",
      R"({"request_id": "r", "image": "x", "rectangles": [[3, 0, 3, 4]]})",
      R"({"request_id": "r", "image": "x", "rectangles": [[0, 5, 2, 4]]})",
      R"({"request_id": "r", "image": "x", "rectangles": [[-1, 0, 2, 4]]})",
      R"({"request_id": "r", "image": "x", "rectangles": [["a", 0, 2, 4]]})",
  };
  for (const char* text : bad_crops) {
    try {
      parse_crop_request(text);
      FAIL("accepted: " << text);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Format);
    }
  }
  CHECK_THROWS_AS(parse_text_request(R"({"request_id": "r", "texts": ["", "b"]})"), Error);
  CHECK_THROWS_AS(parse_text_request(R"({"request_id": "r", "texts": "b"})"), Error);
}

TEST_CASE("responses round trip, with and without the error trailer") {
  EncodeResponse r;
  r.request_id = "req_00000003";
  r.features.resize(3, 2);
  r.features << 1, 2, NAN, NAN, -0.5f, 1e-20f;
  const EncodeResponse plain = parse_response(serialize_response(EncodeResponse{r.request_id, r.features.topRows(1), {}}));
  CHECK(plain.errors.empty());
  CHECK(plain.features == r.features.topRows(1));

  r.errors = {{1, "could not decode"}};
  const auto bytes = serialize_response(r);
  const EncodeResponse b = parse_response(bytes);
  CHECK(b.request_id == r.request_id);
  CHECK(std::isnan(b.features(1, 0)));
  CHECK(b.features(2, 1) == 1e-20f);
  REQUIRE(b.errors.size() == 1);
  CHECK(b.errors[0].first == 1);
  CHECK(b.errors[0].second == "could not decode");

  auto cut = bytes;
  cut.resize(20);
  CHECK_THROWS_AS(parse_response(cut), Error);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(parse_response(extra), Error);
}

TEST_CASE("features through the service match the in-process encoder") {
  TempDir dir("ov3d_test_service");
  MockService service(dir.path);
  ServiceOptions o;
  o.directory = dir.path;
  o.feature_dim = 4;
  o.timeout = std::chrono::milliseconds(20000);
  ServiceEncoder remote(o);
  MeanColorEncoder local;
  const Image img = test_image();
  ScaleSpec scales;
  scales.divisors = {2, 4};
  const auto a = extract_view_features(img, scales, remote, 5);
  const auto b = extract_view_features(img, scales, local, 5);
  write_feature_map(a, dir.path / "a.ovsf");
  write_feature_map(b, dir.path / "b.ovsf");
  CHECK(read_file_bytes(dir.path / "a.ovsf") == read_file_bytes(dir.path / "b.ovsf"));
  CHECK(service.answered() > 0);

  const TextFeatureBank bank = remote.encode_text({"x", "y"});
  CHECK(bank.labels == std::vector<std::string>{"x", "y"});
  CHECK(bank.dim() == 4);
}

TEST_CASE("service failures surface as Encoder errors naming the crop") {
  TempDir dir("ov3d_test_service_err");
  MockService service(dir.path, 6);
  ServiceOptions o;
  o.directory = dir.path;
  o.feature_dim = 4;
  o.timeout = std::chrono::milliseconds(20000);
  ServiceEncoder remote(o);
  const Image img = test_image();
  CHECK(remote.encode(img, {0, 0, 8, 8}).size() == 4);
  try {
    remote.encode(img, {1, 2, 4, 8});
    FAIL("NaN row accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Encoder);
    CHECK(std::string(e.what()).find("(1, 2, 4, 8)") != std::string::npos);
    CHECK(std::string(e.what()).find("crop too narrow") != std::string::npos);
  }

  // Wrong feature width.
  ServiceOptions wide = o;
  wide.feature_dim = 5;
  wide.id_prefix = "wide";
  ServiceEncoder mismatched(wide);
  CHECK_THROWS_AS(mismatched.encode(img, {0, 0, 8, 8}), Error);
}

TEST_CASE("an absent service times out") {
  TempDir dir("ov3d_test_service_timeout");
  ServiceOptions o;
  o.directory = dir.path;
  o.feature_dim = 4;
  o.timeout = std::chrono::milliseconds(30);
  ServiceEncoder remote(o);
  try {
    remote.encode(test_image(), {0, 0, 8, 8});
    FAIL("no timeout");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Encoder);
  }
  CHECK(fs::exists(dir.path / "req_00000000.json"));
}
