#pragma once

#include <vector>

#include "keytailor/tensor.hpp"

namespace kt {

struct MetricReport {
    std::vector<double> ssim_per_frame;
    std::vector<double> psnr_per_frame;
    double ssim_mean = 0.0;
    double psnr_mean = 0.0;
};

/// Mean local SSIM over an 11x11 gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 1.0, averaged over channels. Inputs [3,H,W].
double ssim(const Tensor& a, const Tensor& b);

/// 10*log10(1/MSE) in dB, capped at 99 for near-identical inputs.
double psnr(const Tensor& a, const Tensor& b);

/// Frame-by-frame metrics for [3,T,H,W] videos.
MetricReport video_metrics(const Tensor& a, const Tensor& b);

}  // namespace kt
