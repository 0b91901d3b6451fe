#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vipa/encoders.hpp"

// Synthetic referring-segmentation scenes: flat-coloured shapes on a dark
// background, each paired with an expression that picks out exactly one of
// them.

namespace vipa {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class Size { small, large };
enum class Relation { left, right, top, bottom };

std::string to_string(ShapeKind s);
std::string to_string(Color c);
std::string to_string(Size s);
std::string to_string(Relation r);

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  Size size = Size::small;
  double cx = 0, cy = 0, radius = 0;

  bool contains(double x, double y) const;
};

/// Parsed form of an expression: the attributes it names.
struct Expression {
  std::optional<Size> size;
  Color color = Color::red;
  ShapeKind shape = ShapeKind::circle;
  std::optional<Relation> relation;
  std::string article;  // "", "a" or "the"

  std::string text() const;
};

/// Objects satisfying `e`. A relation picks the extreme object among those
/// with the named colour and shape, and only when it leads the runner-up by
/// at least `kRelationMargin` pixels.
std::vector<std::size_t> match_expression(const Expression& e, const std::vector<SceneObject>& objects);
inline constexpr double kRelationMargin = 4.0;

/// Attribute triples that never appear in the training split.
struct AttributeTriple {
  Size size;
  Color color;
  ShapeKind shape;
  friend bool operator==(const AttributeTriple&, const AttributeTriple&) = default;
};

enum class SplitKind { train, held_out };

struct SceneGrammar {
  std::vector<AttributeTriple> held_out = {
      {Size::large, Color::yellow, ShapeKind::triangle},
      {Size::small, Color::green, ShapeKind::circle},
      {Size::large, Color::blue, ShapeKind::square},
      {Size::small, Color::red, ShapeKind::triangle},
  };
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  /// When false, held-out triples are kept out of training scenes entirely;
  /// when true they may appear there as distractors but are never described.
  bool held_out_distractors = false;

  bool is_held_out(const SceneObject& o) const;
};

/// Ground-truth pixels plus the expression for one sample.
struct Sample {
  SceneImage image;
  std::vector<std::uint8_t> mask;  // [H x W], 0/1
  std::string expression;
};

struct SyntheticScene {
  Sample sample;
  std::vector<SceneObject> objects;
  std::size_t referent = 0;
  Expression expression;
  std::size_t distractors() const { return objects.size() - 1; }
};

class SceneGenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic in (seed, height, width, split). Sides must be positive
/// multiples of 16.
SyntheticScene generate_scene(const SceneGrammar& grammar, std::uint64_t seed, std::size_t height, std::size_t width,
                              SplitKind split = SplitKind::train);

class ImageFormatError : public std::runtime_error {
 public:
  ImageFormatError(const std::string& what, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// 8-bit binary portable pixmap / graymap.
void write_ppm(const std::filesystem::path& path, const SceneImage& img);
SceneImage read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);
SceneImage parse_ppm(const std::string& bytes);
std::vector<std::uint8_t> parse_pgm(const std::string& bytes, std::size_t& height, std::size_t& width);

/// Left-right mirror of image and mask with "left" and "right" swapped in the
/// expression. Scenes stay valid: shapes are symmetric about the vertical axis.
Sample mirror_sample(const Sample& sample);

/// Objects recovered from a rendered image, one per connected region of a
/// palette colour. Shape comes from how much of its bounding box the region
/// fills, size from its extent.
std::vector<SceneObject> detect_objects(const SceneImage& image);

/// Palette colours and colour words remapped through `perm`. Returns nothing
/// when any object would end up with a held-out attribute triple.
std::optional<Sample> recolor_sample(const Sample& sample, const std::array<Color, 4>& perm,
                                     const SceneGrammar& grammar = {});

/// Image and mask moved by (dx, dy); uncovered pixels become background.
/// Throws std::invalid_argument when a non-background pixel would leave the frame.
Sample shift_sample(const Sample& sample, int dx, int dy);

struct AugmentConfig {
  bool mirror = false;   // probability 1/2
  bool recolor = false;  // uniform over the permutations that keep the split clean
  bool shift = false;    // uniform over offsets that keep every object in frame
  bool any() const { return mirror || recolor || shift; }
};

/// Applies the enabled augmentations with randomness drawn from `seed`.
Sample augment_sample(const Sample& sample, const AugmentConfig& cfg, std::uint64_t seed,
                      const SceneGrammar& grammar = {});

/// image.ppm, mask.pgm (0/255) and expression.txt inside `dir`.
void save_sample(const std::filesystem::path& dir, const Sample& sample);
Sample load_sample(const std::filesystem::path& dir);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::string split;
  std::string expression;
};

inline constexpr const char* kManifestName = "manifest.tsv";

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Seed of sample `index` in a split. Train and validation seeds come from
/// disjoint index ranges.
std::uint64_t scene_seed(std::uint64_t root, SplitKind split, std::size_t index);

struct DatasetSpec {
  std::size_t train = 256;
  std::size_t val = 64;
  std::size_t image_size = 64;
  std::uint64_t seed = 7;
};

/// Generates scenes in parallel and writes them plus the manifest under `out`.
std::vector<ManifestEntry> generate_dataset(const std::filesystem::path& out, const DatasetSpec& spec,
                                            const SceneGrammar& grammar = {});

/// In-memory dataset with the same scenes generate_dataset writes.
std::vector<Sample> generate_samples(const DatasetSpec& spec, SplitKind split, const SceneGrammar& grammar = {});

/// Loads all samples of `split` ("train", "val" or "all") listed in a manifest.
std::vector<Sample> load_split(const std::filesystem::path& manifest, const std::string& split);

}  // namespace vipa
