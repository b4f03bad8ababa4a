#pragma once

// Independent scalar reference implementations used by the tests.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

inline std::vector<double> softmax(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = v > m ? v : m;
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp(z[i] - m);
    s += e[i];
  }
  for (double& v : e) v /= s;
  return e;
}

/// Direct 3x3 same-padding convolution. x: [h][w][ci] flat, w: [ky][kx][ci][co] flat.
inline std::vector<double> conv3x3(const std::vector<double>& x, std::size_t h, std::size_t wd, std::size_t ci,
                                   const std::vector<double>& w, const std::vector<double>& b, std::size_t co) {
  std::vector<double> out(h * wd * co);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x0 = 0; x0 < wd; ++x0)
      for (std::size_t o = 0; o < co; ++o) {
        double acc = b[o];
        for (int ky = -1; ky <= 1; ++ky)
          for (int kx = -1; kx <= 1; ++kx) {
            const long yy = static_cast<long>(y) + ky, xx = static_cast<long>(x0) + kx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd)) continue;
            for (std::size_t i = 0; i < ci; ++i) {
              acc += x[(yy * wd + xx) * ci + i] * w[(((ky + 1) * 3 + (kx + 1)) * ci + i) * co + o];
            }
          }
        out[(y * wd + x0) * co + o] = acc;
      }
  return out;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

}  // namespace oracle
