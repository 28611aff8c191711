#include "keytailor/metrics.hpp"

#include <cmath>

#include "keytailor/errors.hpp"

namespace kt {
namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01, kK2 = 0.03, kL = 1.0;

const std::vector<double>& window() {
    static const std::vector<double> w = [] {
        std::vector<double> v(kWin * kWin);
        double sum = 0.0;
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) {
                double dy = y - kWin / 2, dx = x - kWin / 2;
                v[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
                sum += v[y * kWin + x];
            }
        for (double& e : v) e /= sum;
        return v;
    }();
    return w;
}

double ssim_channel(const double* a, const double* b, size_t H, size_t W) {
    const double c1 = (kK1 * kL) * (kK1 * kL);
    const double c2 = (kK2 * kL) * (kK2 * kL);
    const auto& w = window();
    double total = 0.0;
    size_t count = 0;
    for (size_t y = 0; y + kWin <= H; ++y)
        for (size_t x = 0; x + kWin <= W; ++x) {
            double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
            for (int dy = 0; dy < kWin; ++dy)
                for (int dx = 0; dx < kWin; ++dx) {
                    double wv = w[dy * kWin + dx];
                    double av = a[(y + dy) * W + (x + dx)];
                    double bv = b[(y + dy) * W + (x + dx)];
                    mu_a += wv * av;
                    mu_b += wv * bv;
                    aa += wv * av * av;
                    bb += wv * bv * bv;
                    ab += wv * av * bv;
                }
            double va = aa - mu_a * mu_a;
            double vb = bb - mu_b * mu_b;
            double cov = ab - mu_a * mu_b;
            double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            double den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2);
            total += num / den;
            ++count;
        }
    if (count == 0) throw shape_error("ssim: image smaller than the 11x11 window");
    return total / static_cast<double>(count);
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    if (a.ndim() != 3 || a.shape[0] != 3)
        throw shape_error("ssim: expected [3,H,W], got " + shape_str(a.shape));
    size_t H = a.shape[1], W = a.shape[2];
    double total = 0.0;
    for (size_t c = 0; c < 3; ++c)
        total += ssim_channel(a.data.data() + c * H * W, b.data.data() + c * H * W, H, W);
    return total / 3.0;
}

double psnr(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "psnr");
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse < 1e-10) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

MetricReport video_metrics(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "video_metrics");
    if (a.ndim() != 4 || a.shape[0] != 3)
        throw shape_error("video_metrics: expected [3,T,H,W], got " + shape_str(a.shape));
    size_t T = a.shape[1], H = a.shape[2], W = a.shape[3];
    MetricReport r;
    for (size_t f = 0; f < T; ++f) {
        Tensor fa(Shape{3, H, W}), fb(Shape{3, H, W});
        for (size_t c = 0; c < 3; ++c) {
            std::copy_n(a.data.data() + (c * T + f) * H * W, H * W, fa.data.data() + c * H * W);
            std::copy_n(b.data.data() + (c * T + f) * H * W, H * W, fb.data.data() + c * H * W);
        }
        r.ssim_per_frame.push_back(ssim(fa, fb));
        r.psnr_per_frame.push_back(psnr(fa, fb));
        r.ssim_mean += r.ssim_per_frame.back();
        r.psnr_mean += r.psnr_per_frame.back();
    }
    r.ssim_mean /= static_cast<double>(T);
    r.psnr_mean /= static_cast<double>(T);
    return r;
}

}  // namespace kt
