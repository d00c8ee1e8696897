#include "jl1/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "jl1/errors.hpp"

namespace jl1 {

namespace {

constexpr char kMagic[4] = {'J', 'L', '1', 'V'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    throw format_error(path + ": truncated checkpoint (u32 expected)");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32_payload(std::ostream& out, const Tensor& t) {
  static_assert(sizeof(float) == 4);
  // x86 is little-endian; floats are written as-is.
  out.write(reinterpret_cast<const char*>(t.ptr()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, nlohmann::json meta,
                      const std::vector<NamedTensor>& tensors) {
  meta["tensors"] = tensors.size();
  const std::string doc = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(doc.size()));
  out.write(doc.data(), static_cast<std::streamsize>(doc.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape) put_u32(out, static_cast<std::uint32_t>(d));
    put_f32_payload(out, t.value);
  }
  if (!out) throw io_error("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  const std::string p = path.string();
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw format_error(p + ": not a JL1V checkpoint");
  std::uint32_t version = get_u32(in, p);
  if (version != kVersion)
    throw format_error(p + ": unsupported checkpoint version " +
                       std::to_string(version));
  std::uint32_t doc_len = get_u32(in, p);
  std::string doc(doc_len, '\0');
  in.read(doc.data(), doc_len);
  if (in.gcount() != static_cast<std::streamsize>(doc_len))
    throw format_error(p + ": truncated checkpoint metadata");
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(doc);
  } catch (const nlohmann::json::exception& e) {
    throw format_error(p + ": corrupt checkpoint metadata: " + e.what());
  }
  if (!ck.meta.contains("tensors") || !ck.meta["tensors"].is_number_unsigned())
    throw format_error(p + ": checkpoint metadata lacks a tensor count");
  const std::uint64_t count = ck.meta["tensors"].get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = get_u32(in, p);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len))
      throw format_error(p + ": truncated tensor name");
    std::uint32_t rank = get_u32(in, p);
    if (rank > 8) throw format_error(p + ": implausible tensor rank");
    Shape shape(rank);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = get_u32(in, p);
      numel *= d;
    }
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.ptr()),
            static_cast<std::streamsize>(numel * 4));
    if (in.gcount() != static_cast<std::streamsize>(numel * 4))
      throw format_error(p + ": truncated tensor payload for " + name);
    ck.tensors.push_back({std::move(name), std::move(t)});
  }
  return ck;
}

void save_vae_checkpoint(const std::filesystem::path& path, const Vae& model,
                         const AdamState* adam, nlohmann::json extra_meta) {
  nlohmann::json meta = std::move(extra_meta);
  meta["format"] = "jl1-vae";
  meta["arch"] = model.cfg.image_size == 64 ? "conv64" : "conv16";
  meta["image_size"] = model.cfg.image_size;
  meta["channels"] = model.cfg.channels;
  meta["latent_dim"] = model.cfg.latent_dim;

  std::vector<NamedTensor> tensors;
  for (const auto& e : model.params.entries)
    tensors.push_back({e.name, e.value});
  if (adam) {
    meta["adam"] = {{"lr", adam->lr},
                    {"beta1", adam->beta1},
                    {"beta2", adam->beta2},
                    {"epsilon", adam->epsilon},
                    {"step", adam->step}};
    std::size_t slot = 0;
    for (const auto& e : model.params.entries) {
      if (!e.trainable) continue;
      tensors.push_back({"adam.m." + e.name, adam->m[slot]});
      tensors.push_back({"adam.v." + e.name, adam->v[slot]});
      ++slot;
    }
  }
  write_checkpoint(path, std::move(meta), tensors);
}

LoadedVae load_vae_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  const std::string p = path.string();
  if (!ck.meta.contains("format") || ck.meta["format"] != "jl1-vae")
    throw format_error(p + ": not a VAE checkpoint");
  VaeConfig cfg;
  cfg.image_size = ck.meta.at("image_size").get<std::int64_t>();
  cfg.channels = ck.meta.at("channels").get<std::int64_t>();
  cfg.latent_dim = ck.meta.at("latent_dim").get<std::int64_t>();

  LoadedVae out{Vae::create(cfg, 0), std::nullopt, ck.meta};

  std::map<std::string, Tensor*> by_name;
  for (auto& t : ck.tensors) by_name[t.name] = &t.value;

  for (auto& e : out.model.params.entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end())
      throw format_error(p + ": checkpoint is missing parameter " + e.name);
    if (it->second->shape != e.value.shape)
      throw format_error(p + ": shape mismatch for parameter " + e.name);
    e.value.data = it->second->data;
    by_name.erase(it);
  }

  if (ck.meta.contains("adam")) {
    AdamState adam;
    const auto& a = ck.meta["adam"];
    adam.lr = a.at("lr").get<float>();
    adam.beta1 = a.at("beta1").get<float>();
    adam.beta2 = a.at("beta2").get<float>();
    adam.epsilon = a.at("epsilon").get<float>();
    adam.step = a.at("step").get<std::int64_t>();
    for (const auto& e : out.model.params.entries) {
      if (!e.trainable) continue;
      for (const char* prefix : {"adam.m.", "adam.v."}) {
        auto it = by_name.find(prefix + e.name);
        if (it == by_name.end())
          throw format_error(p + ": checkpoint is missing " + prefix + e.name);
        if (it->second->shape != e.value.shape)
          throw format_error(p + ": shape mismatch for " + prefix + e.name);
        (prefix[5] == 'm' ? adam.m : adam.v).push_back(std::move(*it->second));
        by_name.erase(it);
      }
    }
    out.adam = std::move(adam);
  }

  if (!by_name.empty())
    throw format_error(p + ": checkpoint holds unexpected tensor " +
                       by_name.begin()->first);
  return out;
}

}  // namespace jl1
