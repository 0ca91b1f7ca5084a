#include "rosetta/checkpoint.hpp"

#include <bit>
#include <fstream>

#include <json.hpp>

namespace rosetta {

namespace {

constexpr const char* kMagic = "ROSETTA-CHECKPOINT 1";

nlohmann::json architecture_json(const Architecture& arch) {
  return {{"input_dim", arch.input_dim},
          {"hidden", arch.hidden},
          {"latent_dim", arch.latent_dim},
          {"activation", activation_name(arch.activation)}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture arch;
  arch.input_dim = j.at("input_dim").get<std::size_t>();
  arch.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  arch.latent_dim = j.at("latent_dim").get<std::size_t>();
  arch.activation = parse_activation(j.at("activation").get<std::string>());
  return arch;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& model) {
  nlohmann::json manifest;
  manifest["architecture"] = architecture_json(model.architecture);
  manifest["provenance"] = {{"seed", model.provenance.seed},
                            {"config_digest", model.provenance.config_digest},
                            {"epochs", model.provenance.epochs}};
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, m] : model.params) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  manifest["tensors"] = std::move(tensors);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << kMagic << '\n' << manifest.dump() << '\n';
  for (const auto& [name, m] : model.params) {
    for (double x : m.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>(bits >> (8 * i));
      out.write(bytes, 8);
    }
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string magic;
  std::string header;
  if (!std::getline(in, magic) || magic != kMagic) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  if (!std::getline(in, header)) throw CheckpointError("checkpoint manifest missing");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }

  ModelState model;
  try {
    model.architecture = architecture_from_json(manifest.at("architecture"));
    const auto& prov = manifest.at("provenance");
    model.provenance.seed = prov.at("seed").get<std::uint64_t>();
    model.provenance.config_digest = prov.at("config_digest").get<std::string>();
    model.provenance.epochs = prov.at("epochs").get<std::size_t>();
    for (const auto& t : manifest.at("tensors")) {
      Matrix m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
      for (double& x : m.data()) {
        unsigned char bytes[8];
        if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
          throw CheckpointError("checkpoint payload truncated");
        }
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        x = std::bit_cast<double>(bits);
      }
      model.params.add(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }

  // The stored layout must be exactly what the architecture implies.
  if (!model.params.same_layout(zero_model(model.architecture).params)) {
    throw CheckpointError("checkpoint tensors do not match its architecture");
  }
  return model;
}

}  // namespace rosetta
