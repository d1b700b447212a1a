#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stf/data/generator.hpp"
#include "stf/data/png_io.hpp"
#include "stf/tensor.hpp"
#include "stf/types.hpp"

namespace stf {

using json = nlohmann::json;

inline void to_json(json& j, const GeneratorConfig& c) {
  j = json{{"width", c.width},
           {"height", c.height},
           {"num_frames", c.num_frames},
           {"objects_min", c.objects_min},
           {"objects_max", c.objects_max},
           {"size_min", c.size_min},
           {"size_max", c.size_max},
           {"speed_min", c.speed_min},
           {"speed_max", c.speed_max},
           {"jitter", c.jitter},
           {"occluder_density", c.occluder_density},
           {"blur", c.blur},
           {"blur_substeps", c.blur_substeps},
           {"num_classes", c.num_classes}};
}

inline void from_json(const json& j, GeneratorConfig& c) {
  GeneratorConfig d;
  c.width = j.value("width", d.width);
  c.height = j.value("height", d.height);
  c.num_frames = j.value("num_frames", d.num_frames);
  c.objects_min = j.value("objects_min", d.objects_min);
  c.objects_max = j.value("objects_max", d.objects_max);
  c.size_min = j.value("size_min", d.size_min);
  c.size_max = j.value("size_max", d.size_max);
  c.speed_min = j.value("speed_min", d.speed_min);
  c.speed_max = j.value("speed_max", d.speed_max);
  c.jitter = j.value("jitter", d.jitter);
  c.occluder_density = j.value("occluder_density", d.occluder_density);
  c.blur = j.value("blur", d.blur);
  c.blur_substeps = j.value("blur_substeps", d.blur_substeps);
  c.num_classes = j.value("num_classes", d.num_classes);
}

struct SequenceManifest {
  std::string sequence_id;
  int num_frames = 0;
  int height = 0, width = 0;
  GeneratorConfig generator_config;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string frame_path(const std::filesystem::path& dir, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return (dir / "frames" / buf).string();
}

inline ImageU8 frame_to_u8(const Frame& f) {
  ImageU8 img;
  img.width = f.width();
  img.height = f.height();
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.rgb[(static_cast<size_t>(y) * img.width + x) * 3 + static_cast<size_t>(c)] =
            static_cast<std::uint8_t>(std::lround(f.pixels.at(c, y, x) * 255.0f));
  return img;
}

inline Tensor<float> u8_to_pixels(const ImageU8& img) {
  Tensor<float> t({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(c, y, x) =
            img.rgb[(static_cast<size_t>(y) * img.width + x) * 3 + static_cast<size_t>(c)] /
            255.0f;
  return t;
}

}  // namespace detail

// Layout: <dir>/frames/%06d.png, <dir>/annotations.jsonl (one record per
// frame), <dir>/manifest.json.
inline SequenceManifest save_sequence(const std::vector<Frame>& frames,
                                      const std::vector<Annotation>& annotations,
                                      const std::string& directory,
                                      const std::string& sequence_id,
                                      const GeneratorConfig& gen_config, std::uint64_t seed) {
  if (frames.empty() || frames.size() != annotations.size())
    throw std::invalid_argument("save_sequence: frames/annotations mismatch");
  namespace fs = std::filesystem;
  const fs::path dir(directory);
  fs::create_directories(dir / "frames");

  for (size_t i = 0; i < frames.size(); ++i)
    write_png(detail::frame_path(dir, static_cast<int>(i)), detail::frame_to_u8(frames[i]));

  std::ofstream ann_out(dir / "annotations.jsonl");
  for (size_t i = 0; i < annotations.size(); ++i) {
    json boxes = json::array();
    const Annotation& a = annotations[i];
    for (size_t k = 0; k < a.boxes.size(); ++k) {
      const Box& b = a.boxes[k];
      boxes.push_back(json{{"x_min", b.x_min},
                           {"y_min", b.y_min},
                           {"x_max", b.x_max},
                           {"y_max", b.y_max},
                           {"class_id", b.class_id},
                           {"occlusion_fraction", a.occlusion_fraction[k]},
                           {"blur_magnitude", a.blur_magnitude[k]}});
    }
    ann_out << json{{"frame", i}, {"boxes", boxes}}.dump() << "\n";
  }
  ann_out.close();

  SequenceManifest m;
  m.sequence_id = sequence_id;
  m.num_frames = static_cast<int>(frames.size());
  m.height = frames[0].height();
  m.width = frames[0].width();
  m.generator_config = gen_config;
  m.seed = seed;
  std::ofstream mf(dir / "manifest.json");
  mf << json{{"sequence_id", m.sequence_id}, {"num_frames", m.num_frames},
             {"height", m.height},           {"width", m.width},
             {"generator_config", json(m.generator_config)}, {"seed", m.seed}}
            .dump(2);
  return m;
}

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingFrameError : DatasetError {
  int index;
  explicit MissingFrameError(int i)
      : DatasetError("missing frame file for index " + std::to_string(i)), index(i) {}
};
struct ManifestMismatchError : DatasetError {
  using DatasetError::DatasetError;
};
struct MalformedAnnotationError : DatasetError {
  using DatasetError::DatasetError;
};

inline std::pair<std::vector<Frame>, std::vector<Annotation>> load_sequence(
    const std::string& directory, SequenceManifest* manifest_out = nullptr) {
  namespace fs = std::filesystem;
  const fs::path dir(directory);
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DatasetError("missing manifest.json in " + directory);
  json mj;
  try {
    mf >> mj;
  } catch (const json::exception& e) {
    throw DatasetError("malformed manifest.json: " + std::string(e.what()));
  }
  SequenceManifest m;
  m.sequence_id = mj.at("sequence_id").get<std::string>();
  m.num_frames = mj.at("num_frames").get<int>();
  m.height = mj.at("height").get<int>();
  m.width = mj.at("width").get<int>();
  m.generator_config = mj.value("generator_config", GeneratorConfig{});
  m.seed = mj.value("seed", std::uint64_t(0));

  // A gap before the last present index is a deleted frame; a short or long
  // tail is a manifest/frame-count mismatch.
  int last_present = -1;
  for (int i = 0; i < m.num_frames; ++i)
    if (fs::exists(detail::frame_path(dir, i))) last_present = i;
  for (int i = 0; i < last_present; ++i)
    if (!fs::exists(detail::frame_path(dir, i))) throw MissingFrameError(i);
  if (last_present + 1 != m.num_frames || fs::exists(detail::frame_path(dir, m.num_frames)))
    throw ManifestMismatchError("manifest declares " + std::to_string(m.num_frames) +
                                " frames but found " + std::to_string(last_present + 1));

  std::vector<Frame> frames;
  for (int i = 0; i < m.num_frames; ++i) {
    ImageU8 img = read_png(detail::frame_path(dir, i));
    if (img.width != m.width || img.height != m.height)
      throw ManifestMismatchError("frame " + std::to_string(i) + " dims disagree with manifest");
    Frame f;
    f.pixels = detail::u8_to_pixels(img);
    f.index = i;
    f.sequence_id = m.sequence_id;
    frames.push_back(std::move(f));
  }

  std::vector<Annotation> annotations(static_cast<size_t>(m.num_frames));
  std::ifstream ann_in(dir / "annotations.jsonl");
  if (!ann_in) throw DatasetError("missing annotations.jsonl in " + directory);
  std::string line;
  int records = 0;
  while (std::getline(ann_in, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
      const int fi = rec.at("frame").get<int>();
      if (fi < 0 || fi >= m.num_frames)
        throw MalformedAnnotationError("annotation frame index out of range: " +
                                       std::to_string(fi));
      Annotation& a = annotations[static_cast<size_t>(fi)];
      for (const json& bj : rec.at("boxes")) {
        Box b;
        b.x_min = bj.at("x_min").get<double>();
        b.y_min = bj.at("y_min").get<double>();
        b.x_max = bj.at("x_max").get<double>();
        b.y_max = bj.at("y_max").get<double>();
        b.class_id = bj.at("class_id").get<int>();
        a.boxes.push_back(b);
        a.occlusion_fraction.push_back(bj.at("occlusion_fraction").get<double>());
        a.blur_magnitude.push_back(bj.at("blur_magnitude").get<double>());
      }
      ++records;
    } catch (const MalformedAnnotationError&) {
      throw;
    } catch (const json::exception& e) {
      throw MalformedAnnotationError("malformed annotation record: " + std::string(e.what()));
    }
  }
  if (records != m.num_frames)
    throw MalformedAnnotationError("annotations cover " + std::to_string(records) + " of " +
                                   std::to_string(m.num_frames) + " frames");
  if (manifest_out) *manifest_out = m;
  return {std::move(frames), std::move(annotations)};
}

// ---------------------------------------------------------------------------
// Pair batching
// ---------------------------------------------------------------------------

// Paired (past, current) frames with the current frame's annotations.
template <typename T>
struct FramePairBatch {
  Tensor<T> past;     // [B,3,H,W]
  Tensor<T> current;  // [B,3,H,W]
  std::vector<Annotation> annotations;
  int pair_stride = 1;
};

struct EmptyStreamError : DatasetError {
  using DatasetError::DatasetError;
};

template <typename T>
Tensor<T> stack_frames(const std::vector<const Frame*>& frames) {
  const int B = static_cast<int>(frames.size());
  const int H = frames[0]->height(), W = frames[0]->width();
  Tensor<T> out({B, 3, H, W});
  for (int b = 0; b < B; ++b) {
    const Tensor<float>& p = frames[static_cast<size_t>(b)]->pixels;
    T* dst = out.ptr() + static_cast<std::int64_t>(b) * 3 * H * W;
    for (std::int64_t i = 0; i < p.numel(); ++i) dst[i] = static_cast<T>(p[i]);
  }
  return out;
}

// All (t - pair_stride, t) pairs of one sequence, batched. Shuffling, when a
// seed is supplied, is deterministic in that seed.
template <typename T>
std::vector<FramePairBatch<T>> make_pair_batches(const std::vector<Frame>& frames,
                                                 const std::vector<Annotation>& annotations,
                                                 int pair_stride, int batch_size,
                                                 bool shuffle = false, std::uint64_t seed = 0) {
  if (pair_stride < 1 || batch_size < 1)
    throw std::invalid_argument("make_pair_batches: bad stride or batch size");
  if (pair_stride >= static_cast<int>(frames.size()))
    throw EmptyStreamError("pair_stride " + std::to_string(pair_stride) +
                           " leaves no pairs in a sequence of " +
                           std::to_string(frames.size()) + " frames");
  std::vector<int> currents;
  for (int t = pair_stride; t < static_cast<int>(frames.size()); ++t) currents.push_back(t);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(currents.begin(), currents.end(), rng);
  }
  std::vector<FramePairBatch<T>> batches;
  for (size_t i = 0; i < currents.size(); i += static_cast<size_t>(batch_size)) {
    FramePairBatch<T> b;
    b.pair_stride = pair_stride;
    std::vector<const Frame*> past, cur;
    for (size_t k = i; k < std::min(currents.size(), i + static_cast<size_t>(batch_size)); ++k) {
      const int t = currents[k];
      past.push_back(&frames[static_cast<size_t>(t - pair_stride)]);
      cur.push_back(&frames[static_cast<size_t>(t)]);
      b.annotations.push_back(annotations[static_cast<size_t>(t)]);
    }
    b.past = stack_frames<T>(past);
    b.current = stack_frames<T>(cur);
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace stf
