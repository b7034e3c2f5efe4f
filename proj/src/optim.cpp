#include "exitlab/optim.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace exitlab {

Adam::Adam(const ModelParams& params, AdamSettings settings, std::vector<bool> trainable)
    : settings_(settings), trainable_(std::move(trainable)), m_(zeros_like(params)), v_(zeros_like(params)) {}

double Adam::step(ModelParams& params, const ParamGrads& grads) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (trainable_[i]) sq += grads[i].squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip = settings_.clip_norm > 0 && norm > settings_.clip_norm ? settings_.clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = settings_.beta1 > 0 ? 1.0 - std::pow(settings_.beta1, static_cast<double>(t_)) : 1.0;
  const double bc2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable_[i]) continue;
    const Matrix g = clip * grads[i];
    m_[i] = settings_.beta1 * m_[i] + (1.0 - settings_.beta1) * g;
    v_[i] = settings_.beta2 * v_[i] + (1.0 - settings_.beta2) * g.cwiseAbs2();
    params.tensors[i].array() -=
        settings_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + settings_.eps);
  }
  ++params.version;
  return norm;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  threads.reserve(w);
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

int default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

}  // namespace exitlab
