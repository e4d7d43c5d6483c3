#include "ktir/data_synth.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ktir/errors.hpp"
#include "ktir/random.hpp"

namespace ktir {
namespace {

constexpr std::size_t kSentencesPerImage = 5;
constexpr std::size_t kGridCells = 4;

const std::vector<SceneCategory> kCategories = {
    {"lake", {40, 90, 60}, {"lake", "boat", "tree", "grass", "mountain"}},
    {"beach", {200, 190, 140}, {"beach", "sea", "sand", "boat", "tree"}},
    {"airport", {120, 120, 110}, {"runway", "airplane", "building", "road", "grass"}},
    {"residential", {150, 140, 120}, {"house", "road", "tree", "car", "pool"}},
    {"harbor", {60, 80, 120}, {"pier", "ship", "sea", "building"}},
    {"tennis", {90, 130, 70}, {"court", "tree", "car", "building"}},
    {"river", {100, 120, 80}, {"river", "bridge", "road", "tree", "field"}},
    {"farmland", {170, 150, 80}, {"farmland", "field", "house", "road"}},
};

const std::map<std::string, std::array<std::uint8_t, 3>> kObjectColors = {
    {"lake", {20, 60, 160}},      {"boat", {240, 240, 240}},  {"tree", {20, 110, 30}},
    {"grass", {110, 190, 80}},    {"mountain", {110, 90, 70}}, {"beach", {230, 210, 160}},
    {"sea", {10, 90, 200}},       {"sand", {220, 190, 120}},  {"runway", {60, 60, 60}},
    {"airplane", {250, 250, 200}}, {"building", {180, 180, 190}}, {"road", {90, 90, 90}},
    {"house", {190, 80, 60}},     {"car", {220, 30, 30}},     {"pool", {60, 200, 230}},
    {"pier", {140, 100, 60}},     {"ship", {200, 200, 120}},  {"court", {40, 160, 140}},
    {"river", {40, 100, 180}},    {"bridge", {160, 150, 140}}, {"field", {150, 200, 60}},
    {"farmland", {200, 170, 60}},
};

const std::set<std::string> kUncountable = {"grass", "sand", "farmland"};

const char* const kTemplates[] = {
    "the scene shows {}",
    "{} can be seen in the image",
    "an aerial view of {}",
    "this area has {}",
    "we can see {} here",
};

double channel(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

std::string phrase(const std::string& noun, Rng& rng) {
  if (kUncountable.count(noun)) return noun == "farmland" ? "some farmland" : "some " + noun;
  if (rng.bernoulli(0.5)) return "a " + noun;
  static const char* const kQuantifiers[] = {"some", "many", "several", "two"};
  return std::string(kQuantifiers[rng.index(4)]) + " " + pluralize(noun);
}

std::string join_phrases(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += (i + 1 == parts.size()) ? " and " : ", ";
    out += parts[i];
  }
  return out;
}

std::string relation_for(const std::string& tail, const SceneCategory& category) {
  return tail == category.objects.front() ? "AtLocation" : "next_to";
}

std::string require_string(const nlohmann::json& j, const char* key, std::size_t index) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw MalformedManifest(fmt::format("entry {}: missing string field '{}'", index, key));
  }
  return j.at(key).get<std::string>();
}

}  // namespace

std::vector<std::string> SceneSpec::objects() const {
  std::vector<std::string> out;
  for (const auto& p : layout) out.push_back(p.name);
  return out;
}

const std::vector<SceneCategory>& scene_categories() { return kCategories; }

std::vector<std::string> object_vocabulary() {
  std::vector<std::string> out;
  for (const auto& [name, color] : kObjectColors) out.push_back(name);
  return out;
}

std::array<std::uint8_t, 3> object_color(const std::string& name) {
  const auto it = kObjectColors.find(name);
  if (it == kObjectColors.end()) throw InvalidArgument("unknown scene object: " + name);
  return it->second;
}

std::string pluralize(const std::string& noun) {
  if (kUncountable.count(noun)) return noun;
  auto ends = [&](std::string_view s) { return noun.size() > s.size() && noun.ends_with(s); };
  if (ends("s") || ends("sh") || ends("ch") || ends("x")) return noun + "es";
  if (ends("y") && std::string_view("aeiou").find(noun[noun.size() - 2]) == std::string_view::npos) {
    return noun.substr(0, noun.size() - 1) + "ies";
  }
  return noun + "s";
}

std::vector<std::size_t> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) out.push_back(i);
  }
  return out;
}

KnowledgeGraph cooccurrence_graph() {
  KnowledgeGraph kg;
  for (const auto& cat : kCategories) {
    for (std::size_t a = 0; a < cat.objects.size(); ++a) {
      for (std::size_t b = a + 1; b < cat.objects.size(); ++b) {
        // Point every pair at the category's place object when it is involved.
        const std::string& head = cat.objects[b];
        const std::string& tail = cat.objects[a];
        kg.add({head, relation_for(tail, cat), tail, Source::RSKG});
      }
    }
  }
  return kg;
}

Image render_image(const SceneSpec& spec, std::size_t size) {
  Image img = Image::filled(size, size, spec.background[0], spec.background[1], spec.background[2]);
  for (const auto& p : spec.layout) {
    const auto x0 = static_cast<std::size_t>(std::clamp(p.x, 0.0, 1.0) * static_cast<double>(size));
    const auto y0 = static_cast<std::size_t>(std::clamp(p.y, 0.0, 1.0) * static_cast<double>(size));
    const auto x1 = static_cast<std::size_t>(
        std::clamp(p.x + p.width, 0.0, 1.0) * static_cast<double>(size));
    const auto y1 = static_cast<std::size_t>(
        std::clamp(p.y + p.height, 0.0, 1.0) * static_cast<double>(size));
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = p.color[c];
      }
    }
  }
  return img;
}

SyntheticDataset generate_dataset(std::size_t n_images, std::uint64_t seed, double omit_prob,
                                  const SynthOptions& options) {
  if (n_images < 10) throw InvalidArgument("generate_dataset: n_images must be at least 10");
  if (!(omit_prob >= 0.0 && omit_prob <= 1.0)) {
    throw InvalidArgument("generate_dataset: omit_prob must be in [0, 1]");
  }
  if (options.image_size == 0 || options.train_fraction < 0.0 || options.val_fraction < 0.0 ||
      options.train_fraction + options.val_fraction >= 1.0) {
    throw InvalidArgument("generate_dataset: bad image size or split fractions");
  }
  Rng rng(mix_seed(seed, 0x5eed));
  SyntheticDataset ds;
  ds.mini_kg = cooccurrence_graph();
  const double cell = 1.0 / static_cast<double>(kGridCells);

  for (std::size_t i = 0; i < n_images; ++i) {
    const auto& cat = kCategories[i % kCategories.size()];
    SceneSpec spec;
    spec.category = cat.name;
    for (std::size_t c = 0; c < 3; ++c) spec.background[c] = channel(cat.background[c]);

    // The place object is always drawn; 1-3 companions join it.
    std::vector<std::string> pool(cat.objects.begin() + 1, cat.objects.end());
    rng.shuffle(std::span<std::string>(pool));
    pool.resize(1 + rng.index(std::min<std::size_t>(3, pool.size())));
    pool.insert(pool.begin(), cat.objects.front());
    for (std::size_t k = 0; k < pool.size(); ++k) {
      ObjectPlacement p;
      p.name = pool[k];
      const std::size_t w = 1 + rng.index(2);
      const std::size_t h = 1 + rng.index(2);
      p.x = static_cast<double>(rng.index(kGridCells - w + 1)) * cell;
      p.y = static_cast<double>(rng.index(kGridCells - h + 1)) * cell;
      p.width = static_cast<double>(w) * cell;
      p.height = static_cast<double>(h) * cell;
      const auto rgb = object_color(p.name);
      for (std::size_t c = 0; c < 3; ++c) p.color[c] = channel(rgb[c]);
      spec.layout.push_back(p);
    }

    ManifestEntry entry;
    entry.filename = fmt::format("scene_{:05d}.ppm", i);
    entry.category = cat.name;
    const auto objects = spec.objects();
    for (std::size_t s = 0; s < kSentencesPerImage; ++s) {
      std::vector<std::string> mentioned;
      for (const auto& obj : objects) {
        if (!rng.bernoulli(omit_prob)) mentioned.push_back(obj);
      }
      if (mentioned.empty()) mentioned.push_back(objects[rng.index(objects.size())]);
      rng.shuffle(std::span<std::string>(mentioned));
      std::vector<std::string> phrases;
      for (const auto& obj : mentioned) phrases.push_back(phrase(obj, rng));
      const char* tmpl = kTemplates[rng.index(std::size(kTemplates))];
      entry.sentences.push_back(fmt::format(fmt::runtime(tmpl), join_phrases(phrases)));
    }
    ds.images.push_back(render_image(spec, options.image_size));
    ds.scenes.push_back(std::move(spec));
    ds.manifest.entries.push_back(std::move(entry));
  }

  std::vector<std::size_t> order(n_images);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_train = static_cast<std::size_t>(options.train_fraction * static_cast<double>(n_images));
  const auto n_val = static_cast<std::size_t>(options.val_fraction * static_cast<double>(n_images));
  for (std::size_t r = 0; r < n_images; ++r) {
    ds.manifest.entries[order[r]].split = r < n_train ? "train" : (r < n_train + n_val ? "val" : "test");
  }
  return ds;
}

DatasetManifest parse_manifest(const std::string& json_text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedManifest(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!root.is_object() || !root.contains("images") || !root.at("images").is_array()) {
    throw MalformedManifest("manifest must be an object with an \"images\" array");
  }
  DatasetManifest m;
  std::size_t index = 0;
  for (const auto& item : root.at("images")) {
    if (!item.is_object()) throw MalformedManifest(fmt::format("entry {} is not an object", index));
    ManifestEntry e;
    e.filename = require_string(item, "filename", index);
    e.split = require_string(item, "split", index);
    if (e.split == "restval") e.split = "train";
    if (e.split != "train" && e.split != "val" && e.split != "test") {
      throw MalformedManifest(fmt::format("entry {}: unknown split '{}'", index, e.split));
    }
    if (item.contains("category") && item.at("category").is_string()) {
      e.category = item.at("category").get<std::string>();
    }
    if (!item.contains("sentences") || !item.at("sentences").is_array()) {
      throw MalformedManifest(fmt::format("entry {}: missing sentences", index));
    }
    for (const auto& s : item.at("sentences")) {
      if (s.is_string()) {
        e.sentences.push_back(s.get<std::string>());
      } else if (s.is_object() && s.contains("raw") && s.at("raw").is_string()) {
        e.sentences.push_back(s.at("raw").get<std::string>());
      } else {
        throw MalformedManifest(fmt::format("entry {}: sentence is neither text nor {{raw}}", index));
      }
    }
    if (e.sentences.size() != kSentencesPerImage) {
      throw MalformedManifest(fmt::format("entry {}: expected 5 sentences, found {}", index,
                                          e.sentences.size()));
    }
    m.entries.push_back(std::move(e));
    ++index;
  }
  return m;
}

std::string manifest_to_json(const DatasetManifest& manifest) {
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json j;
    j["filename"] = e.filename;
    j["split"] = e.split;
    j["sentences"] = e.sentences;
    j["category"] = e.category;
    images.push_back(std::move(j));
  }
  nlohmann::ordered_json root;
  root["images"] = std::move(images);
  return root.dump(1) + "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_manifest(buffer.str());
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_to_json(manifest);
  if (!out) throw IoError("write failed for " + path.string());
}

std::filesystem::path image_path(const std::filesystem::path& dir, const ManifestEntry& entry) {
  return dir / "images" / entry.filename;
}

void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& dataset) {
  if (dataset.images.size() != dataset.manifest.entries.size()) {
    throw InvalidArgument("write_dataset: one image per manifest entry required");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  write_manifest(dir / "manifest.json", dataset.manifest);
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    write_ppm(image_path(dir, dataset.manifest.entries[i]), dataset.images[i]);
  }
  save_graph(dir / "mini_kg.tsv", dataset.mini_kg);
}

std::vector<Image> read_images(const std::filesystem::path& dir, const DatasetManifest& manifest) {
  std::vector<Image> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back(read_ppm(image_path(dir, e)));
  return out;
}

}  // namespace ktir
