#pragma once

// Exhaustive search over the 16 BLN inference-statistics configurations.

#include <algorithm>
#include <array>
#include <cstddef>
#include <thread>
#include <tuple>
#include <vector>

#include "bln/data.hpp"
#include "bln/error.hpp"
#include "bln/nn.hpp"

namespace bln {

struct ConfigResult {
  InferenceFlags flags;
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t rank = 0;

  bool operator==(const ConfigResult&) const = default;
};

/// All 16 flag quadruples, counting in binary with e_b as the most
/// significant bit: (F,F,F,F), (F,F,F,T), ..., (T,T,T,T).
inline std::vector<InferenceFlags> enumerate_configs() {
  std::vector<InferenceFlags> out;
  out.reserve(16);
  for (unsigned bits = 0; bits < 16; ++bits)
    out.push_back({(bits & 8u) != 0, (bits & 4u) != 0, (bits & 2u) != 0, (bits & 1u) != 0});
  return out;
}

/// Loss ascending, then accuracy descending, then flags with false < true.
inline bool ranks_before(const ConfigResult& a, const ConfigResult& b) {
  if (a.loss != b.loss) return a.loss < b.loss;
  if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
  return a.flags < b.flags;
}

/// Sort by the ranking rule and number the results 1..n.
inline std::vector<ConfigResult> rank_results(std::vector<ConfigResult> results) {
  std::sort(results.begin(), results.end(), ranks_before);
  for (std::size_t i = 0; i < results.size(); ++i) results[i].rank = i + 1;
  return results;
}

inline ConfigResult select_best(const std::vector<ConfigResult>& results) {
  if (results.empty()) throw Error("select_best needs at least one result");
  ConfigResult best = *std::min_element(results.begin(), results.end(), ranks_before);
  best.rank = 1;
  return best;
}

/// Evaluate the frozen network under every configuration and return the
/// ranked results. The network is only read; with threads > 1 the
/// evaluations are spread over worker threads.
inline std::vector<ConfigResult> evaluate_all(const Network& net, const Dataset& validation,
                                              std::size_t batch_size,
                                              std::size_t threads = 1) {
  if (!net.has_bln()) throw DataError("no BLN layers to configure");
  const auto configs = enumerate_configs();
  std::vector<ConfigResult> results(configs.size());
  std::vector<std::exception_ptr> errors(configs.size());

  auto work = [&](std::size_t i) {
    try {
      const EvalMetrics m = network_evaluate(net, validation, configs[i], batch_size);
      results[i] = {configs[i], m.loss, m.accuracy, 0};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  threads = std::clamp<std::size_t>(threads, 1, configs.size());
  if (threads == 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) work(i);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < configs.size(); i += threads) work(i);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rank_results(std::move(results));
}

}  // namespace bln
