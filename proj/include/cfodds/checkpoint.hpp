#pragma once

#include <cstdint>
#include <filesystem>

#include "cfodds/cevae.hpp"
#include "cfodds/fair.hpp"
#include "cfodds/net.hpp"

namespace cfodds::checkpoint {

// A checkpoint is a JSON manifest next to a raw sidecar holding every
// parameter block as a flat little-endian float64 array. The manifest records
// the architecture spec, seed, step, sidecar name, and per-block
// (name, count, offset);
// loading restores parameters bit for bit. Paths name the manifest; the
// sidecar swaps the extension for .bin.

struct NetworkCheckpoint {
  net::NetworkSpec spec;
  net::NetworkParams params;
  std::uint64_t seed = 0;
  long step = 0;
};

void save_network(const std::filesystem::path& manifest_path,
                  const net::NetworkSpec& spec, const net::NetworkParams& params,
                  std::uint64_t seed, long step);
NetworkCheckpoint load_network(const std::filesystem::path& manifest_path);

struct CevaeCheckpoint {
  cevae::CevaeSpec spec;
  cevae::CevaeParams params;
  std::uint64_t seed = 0;
  long step = 0;
};

void save_cevae(const std::filesystem::path& manifest_path,
                const cevae::CevaeSpec& spec, const cevae::CevaeParams& params,
                std::uint64_t seed, long step);
CevaeCheckpoint load_cevae(const std::filesystem::path& manifest_path);

struct PredictorCheckpoint {
  fair::PredictorHandle handle;
  std::uint64_t seed = 0;
  long step = 0;
};

void save_predictor(const std::filesystem::path& manifest_path,
                    const fair::PredictorHandle& handle, std::uint64_t seed,
                    long step);
PredictorCheckpoint load_predictor(const std::filesystem::path& manifest_path);

}  // namespace cfodds::checkpoint
