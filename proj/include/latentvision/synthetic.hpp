#ifndef LATENTVISION_SYNTHETIC_HPP
#define LATENTVISION_SYNTHETIC_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "latentvision/image_io.hpp"
#include "latentvision/random.hpp"
#include "latentvision/tensor.hpp"

namespace lvc {

// Synthetic texture fixture: four texture families with randomized phase,
// amplitude and tint so the task is learnable but not trivial.
//   0: horizontal gratings   1: vertical gratings
//   2: checkerboard          3: broadband noise texture
inline Tensor make_texture(int class_id, int size, Rng& rng) {
  Tensor img({3, size, size});
  double amp = rng.uniform(0.25, 0.4);
  double phase = rng.uniform(0.0, 2.0 * M_PI);
  double period = rng.uniform(24.0, 40.0);
  double tint[3] = {rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08),
                    rng.uniform(-0.08, 0.08)};
  int cell = 8 + static_cast<int>(rng.uniform_int(5));  // checker cell, 8..12
  int ox = static_cast<int>(rng.uniform_int(cell));
  int oy = static_cast<int>(rng.uniform_int(cell));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v;
      switch (class_id) {
        case 0:
          v = std::sin(2.0 * M_PI * y / period + phase);
          break;
        case 1:
          v = std::sin(2.0 * M_PI * x / period + phase);
          break;
        case 2:
          v = (((x + ox) / cell + (y + oy) / cell) % 2) ? 1.0 : -1.0;
          break;
        default:
          v = rng.uniform(-1.0, 1.0);
          break;
      }
      for (int c = 0; c < 3; ++c) {
        double pix = 0.5 + tint[c] + amp * v + rng.normal(0.0, 0.02);
        img.data()[(c * size + y) * size + x] =
            pix < 0 ? 0 : (pix > 1 ? 1 : pix);
      }
    }
  }
  return img;
}

inline const std::vector<std::string>& fixture_class_names() {
  static const std::vector<std::string> names = {"hgrating", "vgrating",
                                                 "checker", "noise"};
  return names;
}

// Writes PPM images in a directory-per-class layout plus a manifest with
// explicit train/val/test assignments. Returns the manifest path.
inline std::string generate_fixture(const std::string& dir, int per_class_train,
                                    int per_class_val, int per_class_test,
                                    int size, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
  const auto& names = fixture_class_names();
  for (int cls = 0; cls < static_cast<int>(names.size()); ++cls) {
    fs::create_directories(dir + "/" + names[cls]);
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(cls)));
    int total = per_class_train + per_class_val + per_class_test;
    for (int i = 0; i < total; ++i) {
      Tensor img = make_texture(cls, size, rng);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%04d.ppm", i);
      std::string rel = names[cls] + "/" + buf;
      write_ppm(dir + "/" + rel, img);
      const char* split = i < per_class_train
                              ? "train"
                              : (i < per_class_train + per_class_val ? "val"
                                                                     : "test");
      manifest << rel << "\t" << names[cls] << "\t" << split << "\n";
    }
  }
  return dir + "/manifest.tsv";
}

}  // namespace lvc

#endif  // LATENTVISION_SYNTHETIC_HPP
