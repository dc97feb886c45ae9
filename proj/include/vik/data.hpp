#pragma once

#include "vik/tensor.hpp"

#include <string>
#include <vector>

namespace vik {

struct Dataset {
  TensorF images;  // [n, 3, H, W], values in [0, 1]
  std::vector<int> labels;
  int classes = 0;
  std::string split;

  int n() const { return images.size() ? images.dim(0) : 0; }
};

// Axis-aligned sinusoidal gratings: class parity picks the orientation, the
// frequency steps through adjacent high values. Noise is white pixel noise
// plus row/column streak offsets, all scaled by sigma; mean pixel level is
// class-blind. sigma = 0 makes every image of a class identical.
Dataset synth_dataset(std::uint64_t seed, int per_class, int classes, int resolution,
                      double sigma = 0.1);

// CIFAR-10 binary batches: 3073-byte records, label byte then 3072 pixel
// bytes in channel-planar R,G,B order.
Dataset load_cifar10_file(const std::string& path);

struct Cifar10 {
  Dataset train;
  Dataset test;
};
Cifar10 load_cifar10_binary(const std::string& dir);

// in-place horizontal flip of image row b
void flip_horizontal(TensorF& images, int b);

}  // namespace vik
