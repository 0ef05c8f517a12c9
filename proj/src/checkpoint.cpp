#include "cast/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cast/errors.hpp"

namespace cast {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host byte order");

namespace {

constexpr char kMagic[8] = {'C', 'A', 'S', 'T', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw IntegrityError("checkpoint truncated");
  }
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::vector<std::uint8_t> payload_bytes(const TransformerModel& model) {
  std::vector<std::uint8_t> out;
  out.reserve(model.parameter_count() * sizeof(double));
  for (const ad::Parameter* p : model.parameters()) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(p->value.data());
    out.insert(out.end(), bytes, bytes + p->value.size() * sizeof(double));
  }
  return out;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
          {"d_model", cfg.d_model},       {"vocab_size", cfg.vocab_size},
          {"max_seq_len", cfg.max_seq_len}, {"init_seed", cfg.init_seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.init_seed = j.at("init_seed").get<unsigned>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot open " + path.string());
  }
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return sha256_hex(bytes.data(), bytes.size());
}

std::string model_checksum(const TransformerModel& model) {
  const auto bytes = payload_bytes(model);
  return sha256_hex(bytes.data(), bytes.size());
}

std::vector<std::uint8_t> serialize_checkpoint(const TransformerModel& model,
                                               const nlohmann::json& metadata) {
  const auto payload = payload_bytes(model);
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_json(model.config);
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const ad::Parameter* p : model.parameters()) {
    manifest.push_back(
        {{"name", p->name}, {"shape", p->shape}, {"offset", offset}, {"count", p->size()}});
    offset += p->size() * sizeof(double);
  }
  header["parameters"] = std::move(manifest);
  header["payload_sha256"] = sha256_hex(payload.data(), payload.size());
  header["metadata"] = metadata.is_null() ? nlohmann::json::object() : metadata;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

TransformerModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                        nlohmann::json* metadata) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError("not a checkpoint (bad magic bytes)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) {
    throw IntegrityError("checkpoint header truncated");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint header: ") + e.what());
  }
  pos += header_len;
  const std::size_t payload_size = bytes.size() - pos;
  if (sha256_hex(bytes.data() + pos, payload_size) != header.value("payload_sha256", "")) {
    throw IntegrityError("checkpoint payload checksum mismatch");
  }

  TransformerModel model = init_model(config_from_json(header.at("config")));
  const auto params = model.parameters();
  const auto& manifest = header.at("parameters");
  if (manifest.size() != params.size()) {
    throw IntegrityError("checkpoint manifest lists " + std::to_string(manifest.size()) +
                         " parameters, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    ad::Parameter& p = *params[i];
    if (entry.at("name").get<std::string>() != p.name ||
        entry.at("shape").get<ad::Shape>() != p.shape) {
      throw IntegrityError("checkpoint manifest entry " + std::to_string(i) + " does not match " +
                           p.name);
    }
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = p.size() * sizeof(double);
    if (offset + n > payload_size) {
      throw IntegrityError("checkpoint payload too short for " + p.name);
    }
    std::memcpy(p.value.data(), bytes.data() + pos + offset, n);
  }
  if (metadata != nullptr) {
    *metadata = header.value("metadata", nlohmann::json::object());
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const nlohmann::json& metadata) {
  const auto bytes = serialize_checkpoint(model, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw InputError("cannot write checkpoint " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TransformerModel load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot open checkpoint " + path.string());
  }
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, metadata);
}

}  // namespace cast
