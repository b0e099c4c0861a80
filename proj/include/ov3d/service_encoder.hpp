#pragma once

#include <Eigen/Core>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ov3d/patchfeat.hpp"
#include "ov3d/relevancy.hpp"

namespace ov3d {

// File protocol with the external encoder process. A request is
// <dir>/<request_id>.json; the answer is <dir>/<request_id>.bin (crops) or
// <dir>/<request_id>.ovtb (text). Both sides write to a temporary name and
// rename, so a file that exists is complete.

struct CropRequest {
  std::string request_id;
  std::filesystem::path image;
  std::vector<CropRect> rectangles;
};

struct TextRequest {
  std::string request_id;
  std::vector<std::string> texts;
};

std::string to_json(const CropRequest& request);
std::string to_json(const TextRequest& request);
/// Rejects rectangles with left >= right or upper >= lower.
CropRequest parse_crop_request(const std::string& text);
TextRequest parse_text_request(const std::string& text);

/// Features are n_crops x D. A row of NaN marks an item the service could not
/// encode; `errors` (optional trailer) carries the per-item messages.
struct EncodeResponse {
  std::string request_id;
  Eigen::MatrixXf features;
  std::vector<std::pair<std::uint32_t, std::string>> errors;
};

/// Binary layout: request_id (u32 length + bytes), n u32, D u32, n*D f32
/// row-major, then optionally u32 error count and (u32 index, string) pairs.
std::vector<std::uint8_t> serialize_response(const EncodeResponse& response);
EncodeResponse parse_response(std::vector<std::uint8_t> bytes);

struct ServiceOptions {
  std::filesystem::path directory;
  int feature_dim = 512;
  std::chrono::milliseconds timeout{60000};
  std::chrono::milliseconds poll{5};
  std::string id_prefix = "req";
};

/// PatchEncoder backed by the file protocol. Images without a readable path
/// are written into the request directory first.
class ServiceEncoder : public PatchEncoder {
 public:
  explicit ServiceEncoder(ServiceOptions options);
  int feature_dim() const override { return options_.feature_dim; }
  Eigen::VectorXf encode(const Image& image, const CropRect& rect) override;
  Eigen::MatrixXf encode_batch(const Image& image, std::span<const CropRect> rects) override;

  TextFeatureBank encode_text(const std::vector<std::string>& labels);

 private:
  std::string next_id();
  std::filesystem::path image_path(const Image& image);
  std::filesystem::path wait_for(const std::filesystem::path& path) const;

  ServiceOptions options_;
  std::uint64_t counter_ = 0;
};

/// Writes `text` to `path` through a temporary file and rename.
void write_atomically(const std::filesystem::path& path, const std::string& text);
void write_atomically(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace ov3d
