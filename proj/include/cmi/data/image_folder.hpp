#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <filesystem>

#include "cmi/data/dataset.hpp"
#include "cmi/io/bank_io.hpp"
#include "cmi/io/png.hpp"

namespace cmi {

/// Loads PNG images from a directory in one of three layouts:
///  - a bank directory (index.jsonl + images/): labels are the bank targets;
///  - one sub-directory per class (sorted names define the label order);
///  - a flat folder of PNGs: every label is 0.
/// Files are read in sorted order so the result is deterministic.
inline LabeledImages load_image_folder(const fs::path& dir, int channels = 3) {
  if (!fs::is_directory(dir)) throw IoError("image folder '" + dir.string() + "' does not exist");
  std::vector<torch::Tensor> imgs;
  std::vector<std::int64_t> labels;
  std::int64_t num_classes = 1;

  const auto read_one = [&](const fs::path& p, std::int64_t label) {
    auto img = read_png(p, channels);
    if (!imgs.empty() && img.sizes() != imgs.front().sizes()) {
      throw ShapeMismatch("image '" + p.string() + "' has a different size than the first image");
    }
    imgs.push_back(std::move(img));
    labels.push_back(label);
  };
  const auto sorted_pngs = [](const fs::path& d) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(d)) {
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
  };

  if (fs::exists(dir / "index.jsonl")) {
    const auto rows = read_bank_index(dir);
    for (const auto& r : rows) {
      read_one(dir / "images" / record_filename(r.id), r.target);
      num_classes = std::max(num_classes, r.target + 1);
    }
  } else {
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory()) class_dirs.push_back(e.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    if (!class_dirs.empty()) {
      num_classes = static_cast<std::int64_t>(class_dirs.size());
      for (std::size_t k = 0; k < class_dirs.size(); ++k) {
        for (const auto& f : sorted_pngs(class_dirs[k])) read_one(f, static_cast<std::int64_t>(k));
      }
    } else {
      for (const auto& f : sorted_pngs(dir)) read_one(f, 0);
    }
  }
  if (imgs.empty()) throw EmptyDataset("no PNG images found under '" + dir.string() + "'");
  return {from_uint8(torch::stack(imgs)), torch::tensor(labels, torch::kLong), num_classes};
}

/// Writes a dataset in the class-sub-directory layout.
inline void save_image_folder(const LabeledImages& data, const fs::path& dir) {
  data.validate();
  const auto u8 = to_uint8(data.images);
  for (std::int64_t i = 0; i < data.size(); ++i) {
    const auto label = data.labels[i].item<std::int64_t>();
    char cls[32];
    std::snprintf(cls, sizeof cls, "class_%03lld", static_cast<long long>(label));
    const auto sub = dir / cls;
    fs::create_directories(sub);
    write_png(sub / record_filename(i), u8[i]);
  }
}

}  // namespace cmi
