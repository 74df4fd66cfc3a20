#ifndef LATENTVISION_IMAGE_IO_HPP
#define LATENTVISION_IMAGE_IO_HPP

#include <fstream>
#include <stdexcept>
#include <string>

#include <opencv2/imgcodecs.hpp>

#include "latentvision/tensor.hpp"

namespace lvc {

// Loads any OpenCV-readable image as [3,H,W] doubles in [0,1] (RGB order).
inline Tensor load_image(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("unreadable image: " + path);
  Tensor t({3, img.rows, img.cols});
  for (int y = 0; y < img.rows; ++y) {
    const cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.cols; ++x) {
      // OpenCV loads BGR.
      t.data()[(0 * img.rows + y) * img.cols + x] = row[x][2] / 255.0;
      t.data()[(1 * img.rows + y) * img.cols + x] = row[x][1] / 255.0;
      t.data()[(2 * img.rows + y) * img.cols + x] = row[x][0] / 255.0;
    }
  }
  return t;
}

inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("write_ppm: expected [3,H,W]");
  const int H = img.dim(1), W = img.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "P6\n" << W << " " << H << "\n255\n";
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = img.data()[(c * H + y) * W + x];
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        os.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
      }
}

// Reflect-pads H and W up to the next multiple of `mult`.
inline Tensor reflect_pad_to_multiple(const Tensor& img, int mult) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const int PH = (H + mult - 1) / mult * mult;
  const int PW = (W + mult - 1) / mult * mult;
  if (PH == H && PW == W) return img;
  Tensor out({C, PH, PW});
  auto reflect = [](int i, int n) {
    if (i < n) return i;
    int r = 2 * n - 2 - i;  // mirror without repeating the edge
    return r < 0 ? 0 : r;
  };
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < PH; ++y)
      for (int x = 0; x < PW; ++x)
        out.data()[(c * PH + y) * PW + x] =
            img.data()[(c * H + reflect(y, H)) * W + reflect(x, W)];
  return out;
}

}  // namespace lvc

#endif  // LATENTVISION_IMAGE_IO_HPP
