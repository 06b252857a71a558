#include "refcut/data_io.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

namespace refcut {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string().compare(b.filename().string()) < 0;
  });
  return out;
}

PartObject load_object(const fs::path& dir, const std::string& category,
                       const std::vector<std::string>& canonical) {
  const std::string where = dir.filename().string();
  auto fail = [&](const std::string& m) -> DatasetError {
    return DatasetError("object '" + where + "' (" + dir.string() + "): " + m);
  };
  const json meta = read_json(dir / "parts.json");
  const int version = meta.value("format_version", 0);
  if (version != kFormatVersion) throw fail("unsupported format_version " + std::to_string(version));
  PartObject obj;
  obj.object_id = meta.at("object_id").get<std::string>();
  obj.category = meta.at("category").get<std::string>();
  if (obj.category != category) {
    throw fail("parts.json category '" + obj.category + "' does not match directory '" + category +
               "'");
  }
  const auto tags = meta.at("tags").get<std::vector<std::string>>();
  for (const auto& t : tags) {
    if (std::find(canonical.begin(), canonical.end(), t) == canonical.end()) {
      throw fail("unknown tag '" + t + "' for category '" + category + "'");
    }
  }
  try {
    obj.image = read_png(dir / "image.png");
  } catch (const std::exception& e) {
    throw fail(e.what());
  }
  IndexImage indices;
  try {
    indices = read_index_png(dir / "parts.png");
  } catch (const std::exception& e) {
    throw fail(e.what());
  }
  if (indices.height != obj.image.height || indices.width != obj.image.width) {
    throw fail("part mask is " + std::to_string(indices.height) + "x" +
               std::to_string(indices.width) + " but the image is " +
               std::to_string(obj.image.height) + "x" + std::to_string(obj.image.width));
  }
  std::vector<BitMask> masks(tags.size(), BitMask(indices.height, indices.width));
  for (std::size_t i = 0; i < indices.data.size(); ++i) {
    const int v = indices.data[i];
    if (v == 0) continue;
    if (v > static_cast<int>(tags.size())) {
      throw fail("part index " + std::to_string(v) + " exceeds the " +
                 std::to_string(tags.size()) + " listed tags");
    }
    masks[static_cast<std::size_t>(v - 1)].set_flat(i, true);
  }
  for (const auto& tag : canonical) {
    const auto it = std::find(tags.begin(), tags.end(), tag);
    if (it == tags.end()) continue;
    BitMask& m = masks[static_cast<std::size_t>(it - tags.begin())];
    if (!m.any()) {
      spdlog::warn("object '{}': part '{}' has no pixels, skipped", obj.object_id, tag);
      continue;
    }
    obj.parts.push_back({tag, std::move(m)});
  }
  try {
    obj.validate();
  } catch (const std::invalid_argument& e) {
    throw fail(e.what());
  }
  return obj;
}

}  // namespace

CategoryTags read_categories(const fs::path& root) {
  const json j = read_json(root / "categories.json");
  CategoryTags out;
  for (const auto& [name, tags] : j.at("categories").items()) {
    out[name] = tags.get<std::vector<std::string>>();
    std::set<std::string> unique(out[name].begin(), out[name].end());
    if (unique.size() != out[name].size())
      throw DatasetError("categories.json: duplicate tag in category '" + name + "'");
  }
  return out;
}

Dataset load_part_dataset(const fs::path& root, const std::string& split) {
  const CategoryTags categories = read_categories(root);
  const fs::path split_dir = root / split;
  if (!fs::is_directory(split_dir)) throw DatasetError("missing split directory " + split_dir.string());

  std::vector<std::pair<fs::path, std::string>> jobs;
  for (const auto& cat_dir : sorted_subdirs(split_dir)) {
    const std::string category = cat_dir.filename().string();
    if (!categories.count(category))
      throw DatasetError("category '" + category + "' is not listed in categories.json");
    for (const auto& obj_dir : sorted_subdirs(cat_dir)) jobs.emplace_back(obj_dir, category);
  }

  Dataset out(jobs.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const long n = static_cast<long>(jobs.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    try {
      const auto& [dir, category] = jobs[static_cast<std::size_t>(i)];
      out[static_cast<std::size_t>(i)] = load_object(dir, category, categories.at(category));
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  sort_by_object_id(out);
  for (std::size_t i = 1; i < out.size(); ++i)
    if (out[i].object_id == out[i - 1].object_id)
      throw DatasetError("duplicate object_id '" + out[i].object_id + "'");
  return out;
}

void export_tda(const Dataset& dataset, const fs::path& root, const std::string& split) {
  fs::create_directories(root / split);
  CategoryTags categories;
  if (fs::exists(root / "categories.json")) categories = read_categories(root);
  for (const auto& obj : dataset) {
    obj.validate();
    auto& tags = categories[obj.category];
    for (const auto& p : obj.parts)
      if (std::find(tags.begin(), tags.end(), p.tag) == tags.end()) tags.push_back(p.tag);
  }
  json cats = json::object();
  for (const auto& [name, tags] : categories) cats[name] = tags;
  write_json(root / "categories.json", {{"format_version", kFormatVersion}, {"categories", cats}});

  for (const auto& obj : dataset) {
    const fs::path dir = root / split / obj.category / obj.object_id;
    fs::create_directories(dir);
    write_png(dir / "image.png", obj.image);
    IndexImage indices{obj.image.height, obj.image.width,
                       std::vector<std::uint8_t>(obj.image.data.size() / 3, 0)};
    std::vector<std::string> tags;
    for (std::size_t p = 0; p < obj.parts.size(); ++p) {
      tags.push_back(obj.parts[p].tag);
      const auto& m = obj.parts[p].mask;
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) indices.data[i] = static_cast<std::uint8_t>(p + 1);
    }
    write_index_png(dir / "parts.png", indices);
    write_json(dir / "parts.json", {{"format_version", kFormatVersion},
                                    {"object_id", obj.object_id},
                                    {"category", obj.category},
                                    {"tags", tags}});
  }
}

std::size_t resolve_contested_pixels(std::vector<Part>& parts) {
  std::vector<std::size_t> order(parts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return parts[a].tag.compare(parts[b].tag) < 0; });
  std::size_t contested = 0;
  if (parts.empty()) return 0;
  const std::size_t n = parts.front().mask.size();
  for (std::size_t i = 0; i < n; ++i) {
    bool claimed = false, counted = false;
    for (std::size_t idx : order) {
      if (!parts[idx].mask[i]) continue;
      if (!claimed) {
        claimed = true;
        continue;
      }
      parts[idx].mask.set_flat(i, false);
      if (!counted) {
        ++contested;
        counted = true;
      }
    }
  }
  return contested;
}

Dataset convert_coco_parts(const fs::path& annotation_json, const fs::path& image_dir) {
  const json j = read_json(annotation_json);
  std::map<int, std::pair<std::string, std::string>> part_names;  // id -> (object class, tag)
  for (const auto& c : j.at("categories"))
    part_names[c.at("id").get<int>()] = {c.at("supercategory").get<std::string>(),
                                         c.at("name").get<std::string>()};
  std::map<int, PartObject> objects;
  for (const auto& im : j.at("images")) {
    PartObject obj;
    const auto file = im.at("file_name").get<std::string>();
    obj.object_id = fs::path(file).stem().string();
    obj.image = read_png(image_dir / file);
    objects[im.at("id").get<int>()] = std::move(obj);
  }
  for (const auto& ann : j.at("annotations")) {
    auto it = objects.find(ann.at("image_id").get<int>());
    if (it == objects.end()) throw DatasetError("annotation refers to an unknown image");
    PartObject& obj = it->second;
    const auto& [category, tag] = part_names.at(ann.at("category_id").get<int>());
    if (obj.category.empty()) obj.category = category;
    if (obj.category != category)
      throw DatasetError("object '" + obj.object_id + "' mixes categories");
    const auto& seg = ann.at("segmentation");
    if (!seg.is_array()) throw DatasetError("object '" + obj.object_id + "': RLE segmentation unsupported");
    cv::Mat canvas = cv::Mat::zeros(obj.image.height, obj.image.width, CV_8UC1);
    std::vector<std::vector<cv::Point>> polys;
    for (const auto& poly : seg) {
      std::vector<cv::Point> pts;
      for (std::size_t i = 0; i + 1 < poly.size(); i += 2)
        pts.emplace_back(static_cast<int>(std::lround(poly[i].get<double>())),
                         static_cast<int>(std::lround(poly[i + 1].get<double>())));
      polys.push_back(std::move(pts));
    }
    cv::fillPoly(canvas, polys, cv::Scalar(1));
    int idx = obj.find(tag);
    if (idx < 0) {
      obj.parts.push_back({tag, BitMask(obj.image.height, obj.image.width)});
      idx = obj.part_count() - 1;
    }
    BitMask& m = obj.parts[static_cast<std::size_t>(idx)].mask;
    for (int r = 0; r < canvas.rows; ++r)
      for (int c = 0; c < canvas.cols; ++c)
        if (canvas.at<std::uint8_t>(r, c)) m.set(r, c);
  }
  Dataset out;
  for (auto& [id, obj] : objects) {
    if (obj.parts.empty()) continue;
    const std::size_t contested = resolve_contested_pixels(obj.parts);
    if (contested) spdlog::info("object '{}': {} contested pixels reassigned", obj.object_id, contested);
    std::erase_if(obj.parts, [](const Part& p) { return !p.mask.any(); });
    out.push_back(std::move(obj));
  }
  sort_by_object_id(out);
  return out;
}

}  // namespace refcut
