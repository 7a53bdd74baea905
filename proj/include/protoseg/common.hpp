#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace protoseg {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using VecF = Vec<float>;

// Pixel (y, x) of an h-by-w grid maps to column y*w + x in channel-major
// matrices (rows = channels, columns = pixels).
inline int pixel_index(int y, int x, int width) { return y * width + x; }

// Thrown when a caller breaks an interface precondition (shape mismatch,
// invalid argument ranges).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InferenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

// --- deterministic RNG streams ---------------------------------------------

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mixes a base seed with stream tags so independent consumers (episode i of
// a run, noise of iteration j, worker w) get decorrelated, reproducible
// streams regardless of scheduling.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag,
                              std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed ^ (tag * 0x9e3779b97f4a7c15ULL));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return h;
}

// Stream tags.
enum : std::uint64_t {
  kStreamInit = 0x494e4954,     // parameter init
  kStreamTrainEp = 0x54524550,  // training episode sampling
  kStreamNoise = 0x4e4f4953,    // latent noise
  kStreamEval = 0x4556414c,     // evaluation episode sampling
  kStreamPredict = 0x50524544,  // test-time sampling
  kStreamRender = 0x524e4452,   // synthetic rendering
};

template <typename S>
Vec<S> standard_normal(int n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vec<S> v(n);
  for (int i = 0; i < n; ++i) v[i] = static_cast<S>(dist(rng));
  return v;
}

// --- tiny parallel-for ------------------------------------------------------

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must be
// independent; callers that reduce results must do so in index order after
// this returns to stay bitwise reproducible.
inline void parallel_for(int n, const std::function<void(int)>& fn,
                         int threads = 0) {
  if (threads <= 0) {
    threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads <= 0) threads = 1;
  }
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace protoseg
