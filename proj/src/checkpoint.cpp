#include "vik/checkpoint.hpp"

#include "vik/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

namespace vik {
namespace {

constexpr char kMagic[4] = {'V', 'I', 'K', 'C'};

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw FormatError("checkpoint: truncated file (u32)");
  return v;
}
std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (!in) throw FormatError("checkpoint: truncated file (u64)");
  return v;
}
std::string get_bytes(std::istream& in, size_t n, const char* what) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError(std::string("checkpoint: truncated file (") + what + ")");
  return s;
}

void put_tensor_payload(std::ostream& out, const TensorF& t) {
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
}

TensorF read_tensor_payload(std::istream& in, const Shape& shape) {
  TensorF t(shape);
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!in) throw FormatError("checkpoint: truncated tensor payload");
  return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write '" + path + "'");
  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const auto digest = config_digest(data.config_text);
  out.write(reinterpret_cast<const char*>(digest.data()), 32);
  put_u32(out, static_cast<std::uint32_t>(data.config_text.size()));
  out.write(data.config_text.data(), static_cast<std::streamsize>(data.config_text.size()));

  put_u32(out, static_cast<std::uint32_t>(data.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : data.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
    put_u64(out, offset);
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
  }
  put_u64(out, offset);
  for (const auto& [name, t] : data.tensors) put_tensor_payload(out, t);

  out.put(data.has_opt ? 1 : 0);
  if (data.has_opt) {
    if (data.opt_m.size() != data.tensors.size() || data.opt_v.size() != data.tensors.size())
      throw UsageError("checkpoint: optimizer state does not match tensor count");
    put_u64(out, static_cast<std::uint64_t>(data.opt_step));
    for (const auto& t : data.opt_m) put_tensor_payload(out, t);
    for (const auto& t : data.opt_v) put_tensor_payload(out, t);
  }
  put_u32(out, static_cast<std::uint32_t>(data.rng_state.size()));
  out.write(data.rng_state.data(), static_cast<std::streamsize>(data.rng_state.size()));
  if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

CheckpointData load_checkpoint(const std::string& path, bool force) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic in '" + path + "' (want VIKC)");
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: version " + std::to_string(version) + " unsupported (want " +
                      std::to_string(kCheckpointVersion) + ")");
  std::array<unsigned char, 32> stored{};
  in.read(reinterpret_cast<char*>(stored.data()), 32);
  if (!in) throw FormatError("checkpoint: truncated digest");

  CheckpointData data;
  const std::uint32_t cfg_len = get_u32(in);
  data.config_text = get_bytes(in, cfg_len, "config");
  if (config_digest(data.config_text) != stored) {
    if (!force)
      throw ConfigError("checkpoint: config digest mismatch in '" + path +
                        "' (pass force to load anyway)");
  }

  const std::uint32_t n_tensors = get_u32(in);
  std::vector<std::pair<std::string, Shape>> table;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::uint32_t name_len = get_u32(in);
    std::string name = get_bytes(in, name_len, "tensor name");
    const std::uint32_t ndim = get_u32(in);
    Shape shape(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(get_u32(in));
    get_u64(in);  // offset; payload is stored sequentially in table order
    table.emplace_back(std::move(name), std::move(shape));
  }
  get_u64(in);  // payload byte count
  for (auto& [name, shape] : table)
    data.tensors.emplace_back(name, read_tensor_payload(in, shape));

  int flag = in.get();
  if (flag == EOF) throw FormatError("checkpoint: truncated optimizer flag");
  data.has_opt = flag != 0;
  if (data.has_opt) {
    data.opt_step = static_cast<std::int64_t>(get_u64(in));
    for (const auto& [name, t] : data.tensors)
      data.opt_m.push_back(read_tensor_payload(in, t.shape()));
    for (const auto& [name, t] : data.tensors)
      data.opt_v.push_back(read_tensor_payload(in, t.shape()));
  }
  const std::uint32_t rng_len = get_u32(in);
  data.rng_state = get_bytes(in, rng_len, "rng state");
  return data;
}

CheckpointData snapshot(Backbone<float>& net, const std::string& config_text,
                        const AdamW<float>* opt, const std::string& rng_state) {
  CheckpointData data;
  data.config_text = config_text;
  data.rng_state = rng_state;
  visit_params(net, [&](const std::string& name, Param<float>& p) {
    data.tensors.emplace_back(name, p.value);
  });
  if (opt) {
    data.has_opt = true;
    data.opt_step = opt->step_count;
    data.opt_m = opt->m;
    data.opt_v = opt->v;
  }
  return data;
}

void restore(Backbone<float>& net, const CheckpointData& data, AdamW<float>* opt) {
  size_t i = 0;
  visit_params(net, [&](const std::string& name, Param<float>& p) {
    if (i >= data.tensors.size() || data.tensors[i].first != name)
      throw FormatError("checkpoint: tensor table mismatch at '" + name + "'");
    if (data.tensors[i].second.shape() != p.value.shape())
      throw ShapeError("checkpoint: shape mismatch for '" + name + "': stored " +
                       shape_str(data.tensors[i].second.shape()) + " vs model " +
                       shape_str(p.value.shape()));
    p.value = data.tensors[i].second;
    ++i;
  });
  if (i != data.tensors.size())
    throw FormatError("checkpoint: stored " + std::to_string(data.tensors.size()) +
                      " tensors, model has " + std::to_string(i));
  if (opt) {
    if (!data.has_opt) throw FormatError("checkpoint: no optimizer state stored");
    opt->step_count = data.opt_step;
    opt->m = data.opt_m;
    opt->v = data.opt_v;
  }
}

}  // namespace vik
