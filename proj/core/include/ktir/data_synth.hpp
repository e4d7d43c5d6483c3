#pragma once

// Synthetic scene corpus whose captions omit some of the objects drawn in
// the image, plus a co-occurrence graph that links the omitted objects back
// to the mentioned ones. Also reads and writes dataset manifests.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ktir/image.hpp"
#include "ktir/kg.hpp"

namespace ktir {

struct ObjectPlacement {
  std::string name;
  // Top-left corner and extent on the unit square.
  double x = 0.0;
  double y = 0.0;
  double width = 0.0;
  double height = 0.0;
  std::array<double, 3> color{};
};

struct SceneSpec {
  std::string category;
  std::array<double, 3> background{};
  std::vector<ObjectPlacement> layout;

  std::vector<std::string> objects() const;
};

struct SceneCategory {
  std::string name;
  std::array<std::uint8_t, 3> background;
  // The first object is the place the others are located at.
  std::vector<std::string> objects;
};

const std::vector<SceneCategory>& scene_categories();
// Every object that can appear in a generated scene.
std::vector<std::string> object_vocabulary();
std::array<std::uint8_t, 3> object_color(const std::string& name);

std::string pluralize(const std::string& noun);

struct ManifestEntry {
  std::string filename;
  std::string split;  // train, val or test
  std::vector<std::string> sentences;
  std::string category;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  // Indices of the entries in one split, in manifest order.
  std::vector<std::size_t> split_indices(const std::string& split) const;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<Image> images;  // parallel to manifest.entries
  std::vector<SceneSpec> scenes;
  KnowledgeGraph mini_kg;
};

struct SynthOptions {
  std::size_t image_size = 32;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
};

// Deterministic given seed. Throws InvalidArgument unless n_images >= 10 and
// 0 <= omit_prob <= 1. Every caption mentions at least one scene object.
SyntheticDataset generate_dataset(std::size_t n_images, std::uint64_t seed, double omit_prob,
                                  const SynthOptions& options = {});

// One triplet per co-occurring pair of every category.
KnowledgeGraph cooccurrence_graph();

// Solid background with each object painted in layout order.
Image render_image(const SceneSpec& spec, std::size_t size);

// Throws MalformedManifest for missing fields, a bad split or a sentence
// count other than 5. Accepts sentences as plain strings or as objects with
// a "raw" field, and maps the split "restval" to "train".
DatasetManifest parse_manifest(const std::string& json_text);
std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Layout: dir/manifest.json, dir/images/<filename>, dir/mini_kg.tsv.
void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& dataset);
// Loads the manifest and every image it references.
std::vector<Image> read_images(const std::filesystem::path& dir, const DatasetManifest& manifest);
std::filesystem::path image_path(const std::filesystem::path& dir, const ManifestEntry& entry);

}  // namespace ktir
