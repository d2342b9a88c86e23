#include "cfodds/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <vector>

#include "cfodds/errors.hpp"

namespace cfodds::checkpoint {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json network_spec_json(const net::NetworkSpec& spec) {
  return json{{"input_dim", spec.input_dim},
              {"hidden_dim", spec.hidden_dim},
              {"num_hidden_layers", spec.num_hidden_layers},
              {"output_dim", spec.output_dim},
              {"dropout_prob", spec.dropout_prob},
              {"layer_norm", spec.layer_norm}};
}

net::NetworkSpec network_spec_from(const json& j) {
  net::NetworkSpec spec;
  spec.input_dim = j.at("input_dim").get<int>();
  spec.hidden_dim = j.at("hidden_dim").get<int>();
  spec.num_hidden_layers = j.at("num_hidden_layers").get<int>();
  spec.output_dim = j.at("output_dim").get<int>();
  spec.dropout_prob = j.at("dropout_prob").get<double>();
  spec.layer_norm = j.at("layer_norm").get<bool>();
  return spec;
}

json cevae_spec_json(const cevae::CevaeSpec& spec) {
  return json{
      {"feature_dim", spec.feature_dim},
      {"group_count", spec.group_count},
      {"latent_dim", spec.latent_dim},
      {"group_embedding_dim", spec.group_embedding_dim},
      {"encoder", network_spec_json(spec.encoder)},
      {"decoder_x", network_spec_json(spec.decoder_x)},
      {"decoder_y", network_spec_json(spec.decoder_y)},
      {"lambda_x", spec.lambda_x},
      {"lambda_y", spec.lambda_y},
      {"lambda_mmd", spec.lambda_mmd},
      {"lambda_mmd_a", spec.lambda_mmd_a},
      {"bandwidth_policy",
       spec.bandwidth_policy == cevae::BandwidthPolicy::kFixed ? "fixed"
                                                               : "median"},
      {"fixed_bandwidth", spec.fixed_bandwidth},
      {"min_group_size", spec.min_group_size}};
}

cevae::CevaeSpec cevae_spec_from(const json& j) {
  cevae::CevaeSpec spec;
  spec.feature_dim = j.at("feature_dim").get<int>();
  spec.group_count = j.at("group_count").get<int>();
  spec.latent_dim = j.at("latent_dim").get<int>();
  spec.group_embedding_dim = j.at("group_embedding_dim").get<int>();
  spec.encoder = network_spec_from(j.at("encoder"));
  spec.decoder_x = network_spec_from(j.at("decoder_x"));
  spec.decoder_y = network_spec_from(j.at("decoder_y"));
  spec.lambda_x = j.at("lambda_x").get<double>();
  spec.lambda_y = j.at("lambda_y").get<double>();
  spec.lambda_mmd = j.at("lambda_mmd").get<double>();
  spec.lambda_mmd_a = j.at("lambda_mmd_a").get<double>();
  const std::string policy = j.at("bandwidth_policy").get<std::string>();
  if (policy == "fixed")
    spec.bandwidth_policy = cevae::BandwidthPolicy::kFixed;
  else if (policy == "median")
    spec.bandwidth_policy = cevae::BandwidthPolicy::kMedianHeuristic;
  else
    throw IoError("unknown bandwidth policy '" + policy + "' in checkpoint");
  spec.fixed_bandwidth = j.at("fixed_bandwidth").get<double>();
  spec.min_group_size = j.at("min_group_size").get<int>();
  return spec;
}

std::filesystem::path sidecar_path(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p.replace_extension(".bin");
  return p;
}

void write_checkpoint(const std::filesystem::path& manifest_path,
                      const std::string& kind, json spec_json,
                      const std::vector<net::ParamBlock>& blocks,
                      std::uint64_t seed, long step) {
  const auto bin_path = sidecar_path(manifest_path);
  json manifest{{"format_version", kFormatVersion},
                {"kind", kind},
                {"seed", seed},
                {"step", step},
                {"binary", bin_path.filename().string()},
                {"spec", std::move(spec_json)}};

  json params = json::array();
  std::size_t offset = 0;
  {
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write " + bin_path.string());
    for (const auto& block : blocks) {
      params.push_back(json{
          {"name", block.name}, {"count", block.size}, {"offset", offset}});
      bin.write(reinterpret_cast<const char*>(block.data),
                static_cast<std::streamsize>(block.size * sizeof(double)));
      offset += block.size * sizeof(double);
    }
    if (!bin) throw IoError("short write to " + bin_path.string());
  }
  manifest["params"] = std::move(params);

  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest_path.string());
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("short write to " + manifest_path.string());
}

json read_manifest(const std::filesystem::path& manifest_path,
                   const std::string& expected_kind) {
  std::ifstream in(manifest_path);
  if (!in)
    throw IoError("missing checkpoint manifest " + manifest_path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest " + manifest_path.string() +
                  ": " + e.what());
  }
  if (manifest.at("format_version").get<int>() != kFormatVersion)
    throw IoError("unsupported checkpoint format version in " +
                  manifest_path.string());
  const std::string kind = manifest.at("kind").get<std::string>();
  if (kind != expected_kind)
    throw IoError("checkpoint " + manifest_path.string() + " holds a '" + kind +
                  "' model, expected '" + expected_kind + "'");
  return manifest;
}

void read_blocks(const std::filesystem::path& manifest_path,
                 const json& manifest, std::vector<net::ParamBlock> blocks) {
  const auto bin_path =
      manifest_path.parent_path() / manifest.at("binary").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("missing checkpoint sidecar " + bin_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)),
                          std::istreambuf_iterator<char>());

  const auto& params = manifest.at("params");
  if (params.size() != blocks.size())
    throw IoError("checkpoint " + manifest_path.string() + " lists " +
                  std::to_string(params.size()) + " blocks, expected " +
                  std::to_string(blocks.size()));
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& entry = params[i];
    const std::string name = entry.at("name").get<std::string>();
    if (name != blocks[i].name)
      throw IoError("checkpoint block '" + name + "' does not match '" +
                    blocks[i].name + "' in " + manifest_path.string());
    const std::size_t count = entry.at("count").get<std::size_t>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    if (count != blocks[i].size)
      throw IoError("checkpoint block '" + name + "' holds " +
                    std::to_string(count) + " values, expected " +
                    std::to_string(blocks[i].size));
    if (offset + count * sizeof(double) > bytes.size())
      throw IoError("checkpoint sidecar " + bin_path.string() +
                    " is shorter than its manifest promises");
    std::memcpy(blocks[i].data, bytes.data() + offset, count * sizeof(double));
  }
}

}  // namespace

// The const_casts below only feed param_blocks, whose views are read, never
// written, on the save path.

void save_network(const std::filesystem::path& manifest_path,
                  const net::NetworkSpec& spec, const net::NetworkParams& params,
                  std::uint64_t seed, long step) {
  spec.validate();
  auto& mutable_params = const_cast<net::NetworkParams&>(params);
  write_checkpoint(manifest_path, "network", network_spec_json(spec),
                   net::param_blocks(mutable_params), seed, step);
}

NetworkCheckpoint load_network(const std::filesystem::path& manifest_path) {
  const json manifest = read_manifest(manifest_path, "network");
  NetworkCheckpoint ckpt;
  ckpt.spec = network_spec_from(manifest.at("spec"));
  ckpt.spec.validate();
  ckpt.seed = manifest.at("seed").get<std::uint64_t>();
  ckpt.step = manifest.at("step").get<long>();
  ckpt.params = net::NetworkParams::zeros(ckpt.spec);
  read_blocks(manifest_path, manifest, net::param_blocks(ckpt.params));
  return ckpt;
}

void save_cevae(const std::filesystem::path& manifest_path,
                const cevae::CevaeSpec& spec, const cevae::CevaeParams& params,
                std::uint64_t seed, long step) {
  spec.validate();
  auto& mutable_params = const_cast<cevae::CevaeParams&>(params);
  write_checkpoint(manifest_path, "cevae", cevae_spec_json(spec),
                   cevae::param_blocks(mutable_params), seed, step);
}

CevaeCheckpoint load_cevae(const std::filesystem::path& manifest_path) {
  const json manifest = read_manifest(manifest_path, "cevae");
  CevaeCheckpoint ckpt;
  ckpt.spec = cevae_spec_from(manifest.at("spec"));
  ckpt.spec.validate();
  ckpt.seed = manifest.at("seed").get<std::uint64_t>();
  ckpt.step = manifest.at("step").get<long>();
  ckpt.params = cevae::CevaeParams::zeros(ckpt.spec);
  read_blocks(manifest_path, manifest, cevae::param_blocks(ckpt.params));
  return ckpt;
}

void save_predictor(const std::filesystem::path& manifest_path,
                    const fair::PredictorHandle& handle, std::uint64_t seed,
                    long step) {
  handle.validate();
  json spec{{"network", network_spec_json(handle.spec)},
            {"input_mode",
             handle.input_mode == fair::InputMode::kLatent ? "latent"
                                                           : "features"},
            {"group_count", handle.group_count},
            {"feature_dim", handle.feature_dim},
            {"latent_dim", handle.latent_dim}};
  auto& mutable_handle = const_cast<fair::PredictorHandle&>(handle);
  write_checkpoint(manifest_path, "predictor", std::move(spec),
                   net::param_blocks(mutable_handle.params), seed, step);
}

PredictorCheckpoint load_predictor(const std::filesystem::path& manifest_path) {
  const json manifest = read_manifest(manifest_path, "predictor");
  const json& spec = manifest.at("spec");
  PredictorCheckpoint ckpt;
  ckpt.handle.spec = network_spec_from(spec.at("network"));
  const std::string mode = spec.at("input_mode").get<std::string>();
  if (mode == "latent")
    ckpt.handle.input_mode = fair::InputMode::kLatent;
  else if (mode == "features")
    ckpt.handle.input_mode = fair::InputMode::kFeatures;
  else
    throw IoError("unknown input mode '" + mode + "' in checkpoint");
  ckpt.handle.group_count = spec.at("group_count").get<int>();
  ckpt.handle.feature_dim = spec.at("feature_dim").get<int>();
  ckpt.handle.latent_dim = spec.at("latent_dim").get<int>();
  ckpt.handle.params = net::NetworkParams::zeros(ckpt.handle.spec);
  read_blocks(manifest_path, manifest, net::param_blocks(ckpt.handle.params));
  ckpt.handle.validate();
  ckpt.seed = manifest.at("seed").get<std::uint64_t>();
  ckpt.step = manifest.at("step").get<long>();
  return ckpt;
}

}  // namespace cfodds::checkpoint
