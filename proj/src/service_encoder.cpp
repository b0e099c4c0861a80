#include "ov3d/service_encoder.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <thread>

#include <json.hpp>

#include "ov3d/binary_io.hpp"
#include "ov3d/error.hpp"

namespace ov3d {

using nlohmann::json;

std::string to_json(const CropRequest& r) {
  json j;
  j["request_id"] = r.request_id;
  j["image"] = r.image.string();
  j["rectangles"] = json::array();
  for (const auto& c : r.rectangles) j["rectangles"].push_back({c.left, c.upper, c.right, c.lower});
  return j.dump();
}

std::string to_json(const TextRequest& r) {
  json j;
  j["request_id"] = r.request_id;
  j["texts"] = r.texts;
  return j.dump();
}

CropRequest parse_crop_request(const std::string& text) {
  CropRequest r;
  try {
    const json j = json::parse(text);
    r.request_id = j.at("request_id").get<std::string>();
    r.image = j.at("image").get<std::string>();
    for (const auto& q : j.at("rectangles")) {
      if (!q.is_array() || q.size() != 4) fail(ErrorCode::Format, "crop request: rectangle needs 4 integers");
      CropRect c{q[0].get<int>(), q[1].get<int>(), q[2].get<int>(), q[3].get<int>()};
      if (c.left < 0 || c.upper < 0 || c.left >= c.right || c.upper >= c.lower) {
        fail(ErrorCode::Format, "crop request: invalid rectangle " + to_string(c));
      }
      r.rectangles.push_back(c);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Format, std::string("crop request: ") + e.what());
  }
  if (r.request_id.empty()) fail(ErrorCode::Format, "crop request: empty request_id");
  return r;
}

TextRequest parse_text_request(const std::string& text) {
  TextRequest r;
  try {
    const json j = json::parse(text);
    r.request_id = j.at("request_id").get<std::string>();
    r.texts = j.at("texts").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::Format, std::string("text request: ") + e.what());
  }
  if (r.request_id.empty()) fail(ErrorCode::Format, "text request: empty request_id");
  for (const auto& t : r.texts)
    if (t.empty()) fail(ErrorCode::Format, "text request: empty label");
  return r;
}

std::vector<std::uint8_t> serialize_response(const EncodeResponse& r) {
  BinaryWriter w;
  w.string(r.request_id);
  w.u32(static_cast<std::uint32_t>(r.features.rows()));
  w.u32(static_cast<std::uint32_t>(r.features.cols()));
  for (Eigen::Index i = 0; i < r.features.rows(); ++i)
    for (Eigen::Index k = 0; k < r.features.cols(); ++k) w.f32(r.features(i, k));
  if (!r.errors.empty()) {
    w.u32(static_cast<std::uint32_t>(r.errors.size()));
    for (const auto& [index, message] : r.errors) {
      w.u32(index);
      w.string(message);
    }
  }
  return w.buffer();
}

EncodeResponse parse_response(std::vector<std::uint8_t> bytes) {
  BinaryReader r(std::move(bytes), "encoder response");
  EncodeResponse out;
  out.request_id = r.string();
  const std::uint32_t n = r.u32();
  const std::uint32_t d = r.u32();
  if (static_cast<std::uint64_t>(n) * d * 4 > r.remaining()) fail(ErrorCode::Truncated, "encoder response: payload");
  out.features.resize(n, d);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t k = 0; k < d; ++k) out.features(i, k) = r.f32();
  if (!r.at_end()) {
    const std::uint32_t count = r.u32();
    for (std::uint32_t e = 0; e < count; ++e) {
      const std::uint32_t index = r.u32();
      out.errors.emplace_back(index, r.string());
    }
    if (!r.at_end()) fail(ErrorCode::Format, "encoder response: trailing bytes");
  }
  return out;
}

void write_atomically(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

void write_atomically(const std::filesystem::path& path, const std::string& text) {
  write_atomically(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ServiceEncoder::ServiceEncoder(ServiceOptions options) : options_(std::move(options)) {
  require(options_.feature_dim > 0, ErrorCode::InvalidArgument, "service encoder: feature_dim must be positive");
  std::filesystem::create_directories(options_.directory);
}

std::string ServiceEncoder::next_id() {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%08llu", options_.id_prefix.c_str(), static_cast<unsigned long long>(counter_++));
  return buf;
}

std::filesystem::path ServiceEncoder::image_path(const Image& image) {
  if (!image.path.empty() && std::filesystem::exists(image.path)) return std::filesystem::absolute(image.path);
  const auto path = options_.directory / ("image_" + image.id + ".png");
  if (!std::filesystem::exists(path)) write_png(image, path);
  return std::filesystem::absolute(path);
}

std::filesystem::path ServiceEncoder::wait_for(const std::filesystem::path& path) const {
  const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
  while (!std::filesystem::exists(path)) {
    if (std::chrono::steady_clock::now() > deadline) {
      fail(ErrorCode::Encoder, "encoder service did not answer " + path.filename().string() + " in time");
    }
    std::this_thread::sleep_for(options_.poll);
  }
  return path;
}

Eigen::VectorXf ServiceEncoder::encode(const Image& image, const CropRect& rect) {
  return encode_batch(image, std::span<const CropRect>(&rect, 1)).col(0);
}

Eigen::MatrixXf ServiceEncoder::encode_batch(const Image& image, std::span<const CropRect> rects) {
  CropRequest request;
  request.request_id = next_id();
  request.image = image_path(image);
  request.rectangles.assign(rects.begin(), rects.end());
  write_atomically(options_.directory / (request.request_id + ".json"), to_json(request));
  const auto path = wait_for(options_.directory / (request.request_id + ".bin"));
  const EncodeResponse response = parse_response(read_file_bytes(path));
  if (response.request_id != request.request_id) {
    fail(ErrorCode::Encoder, "encoder response id '" + response.request_id + "' does not match " + request.request_id);
  }
  if (!response.errors.empty()) {
    const auto& [index, message] = response.errors.front();
    const std::string where = index < rects.size() ? " [crop " + to_string(rects[index]) + " of " + image.id + "]" : "";
    fail(ErrorCode::Encoder, "encoder service: " + message + where);
  }
  if (response.features.rows() != static_cast<Eigen::Index>(rects.size()) ||
      response.features.cols() != options_.feature_dim) {
    fail(ErrorCode::Encoder, "encoder response has shape " + std::to_string(response.features.rows()) + "x" +
                                 std::to_string(response.features.cols()) + ", expected " +
                                 std::to_string(rects.size()) + "x" + std::to_string(options_.feature_dim));
  }
  for (Eigen::Index i = 0; i < response.features.rows(); ++i) {
    if (!response.features.row(i).allFinite()) {
      fail(ErrorCode::Encoder, "encoder service returned no feature for crop " +
                                   to_string(rects[static_cast<std::size_t>(i)]) + " of " + image.id);
    }
  }
  return response.features.transpose();
}

TextFeatureBank ServiceEncoder::encode_text(const std::vector<std::string>& labels) {
  require(!labels.empty(), ErrorCode::InvalidArgument, "encode_text: no labels");
  TextRequest request{next_id(), labels};
  write_atomically(options_.directory / (request.request_id + ".json"), to_json(request));
  const auto path = wait_for(options_.directory / (request.request_id + ".ovtb"));
  TextFeatureBank bank = read_text_bank(path);
  require(bank.labels == labels, ErrorCode::Encoder, "encoder service returned a bank with different labels");
  return bank;
}

}  // namespace ov3d
