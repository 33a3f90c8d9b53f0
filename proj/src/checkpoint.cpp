#include "fwl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace fwl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

json to_json(const ModelConfig& c) {
  const BackboneConfig& b = c.backbone;
  return json{{"vocab_size", b.vocab_size},
              {"d_model", b.d_model},
              {"n_layers", b.n_layers},
              {"n_heads", b.n_heads},
              {"d_ff", b.d_ff},
              {"max_seq_len", b.max_seq_len},
              {"memory_len", b.memory_len},
              {"seed", b.seed},
              {"d_hidden", c.d_hidden},
              {"mask", c.mask.to_string()},
              {"alpha_init", static_cast<double>(c.alpha_init)},
              {"decay_init", static_cast<double>(c.decay_init)}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    BackboneConfig& b = c.backbone;
    b.vocab_size = j.at("vocab_size").get<std::size_t>();
    b.d_model = j.at("d_model").get<std::size_t>();
    b.n_layers = j.at("n_layers").get<std::size_t>();
    b.n_heads = j.at("n_heads").get<std::size_t>();
    b.d_ff = j.at("d_ff").get<std::size_t>();
    b.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    b.memory_len = j.at("memory_len").get<std::size_t>();
    b.seed = j.at("seed").get<std::uint64_t>();
    c.d_hidden = j.at("d_hidden").get<std::size_t>();
    c.mask = FastMask::parse(j.at("mask").get<std::string>());
    c.alpha_init = static_cast<Real>(j.at("alpha_init").get<double>());
    c.decay_init = static_cast<Real>(j.at("decay_init").get<double>());
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

Tensor to_tensor(const Matrix& m) {
  Tensor t;
  t.dims = {m.rows(), m.cols()};
  t.data.assign(m.flat().begin(), m.flat().end());
  return t;
}

Tensor to_tensor(std::span<const Real> v) {
  Tensor t;
  t.dims = {v.size()};
  t.data.assign(v.begin(), v.end());
  return t;
}

Matrix matrix_from_tensor(const Tensor& t, const std::string& name) {
  if (t.dims.size() != 2) throw InputError("tensor " + name + " is not rank 2");
  std::vector<Real> data(t.data.begin(), t.data.end());
  return Matrix(t.dims[0], t.dims[1], std::move(data));
}

namespace {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated checkpoint while reading " + what);
  return v;
}

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put<std::uint64_t>(out, d);
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  json meta{{"model", to_json(ck.model.config)},
            {"step", ck.step},
            {"tokenizer", {{"kind", std::string(to_string(ck.tokenizer.kind))},
                           {"vocab", ck.tokenizer.vocab.tokens()}}},
            {"extra", ck.extra}};
  const std::string meta_text = meta.dump();

  std::map<std::string, Tensor> tensors;
  ck.model.for_each_parameter([&](const std::string& name, std::span<const Real> s) {
    Tensor t = to_tensor(s);
    tensors.emplace(name, std::move(t));
  });
  // Masked-out step sizes and decays are not trainable but still define the model.
  tensors["fwl.alpha_all"] = to_tensor(std::span<const Real>(ck.model.steps.alpha));
  tensors["fwl.decay_all"] = to_tensor(std::span<const Real>(ck.model.decays.raw));
  for (const auto& [name, t] : ck.extra_tensors) {
    if (tensors.count(name)) throw InputError("checkpoint: duplicate tensor name " + name);
    tensors.emplace(name, t);
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, meta_text.size());
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    put<std::uint64_t>(out, tensors.size());
    for (const auto& [name, t] : tensors) write_tensor(out, name, t);
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError(path.string() + " is not a checkpoint file");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = get<std::uint64_t>(in, "metadata length");
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw IoError("truncated checkpoint metadata in " + path.string());

  Checkpoint ck;
  json meta;
  try {
    meta = json::parse(meta_text);
    ck.step = meta.at("step").get<std::uint64_t>();
    ck.tokenizer.kind = parse_tokenizer_kind(meta.at("tokenizer").at("kind").get<std::string>());
    const auto tokens = meta.at("tokenizer").at("vocab").get<std::vector<std::string>>();
    ck.tokenizer.vocab = Vocabulary::from_tokens(tokens);
    ck.extra = meta.value("extra", json::object());
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad metadata: " + e.what());
  } catch (const InputError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  const ModelConfig config = model_config_from_json(meta.at("model"));
  ck.model = zero_model(config);

  std::map<std::string, Tensor> tensors;
  const auto count = get<std::uint64_t>(in, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, "tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(in, "rank of " + name);
    Tensor t;
    for (std::uint32_t r = 0; r < rank; ++r) t.dims.push_back(get<std::uint64_t>(in, "dims of " + name));
    t.data.resize(element_count(t.dims));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw IoError("truncated payload of tensor " + name + " in " + path.string());
    tensors.emplace(std::move(name), std::move(t));
  }

  auto take = [&](const std::string& name, std::span<Real> dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError(path.string() + ": missing tensor " + name);
    if (it->second.data.size() != dst.size())
      throw IoError(path.string() + ": tensor " + name + " has the wrong size");
    std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
    tensors.erase(it);
  };
  take("fwl.alpha_all", ck.model.steps.alpha);
  take("fwl.decay_all", ck.model.decays.raw);
  ck.model.for_each_parameter([&](const std::string& name, std::span<Real> s) { take(name, s); });
  ck.extra_tensors = std::move(tensors);
  return ck;
}

}  // namespace fwl
