#include "bicap/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "bicap/errors.hpp"

namespace bicap {

namespace {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IngestError(std::string("checkpoint: truncated ") + what);
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const char* what) {
  const auto n = get<std::uint64_t>(in, what);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IngestError(std::string("checkpoint: truncated ") + what);
  return s;
}

std::string encode_tensors(const NamedTensors& tensors) {
  std::ostringstream out;
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_string(out, name);
    write_tensor(out, t);
  }
  return out.str();
}

NamedTensors decode_tensors(const std::string& bytes, const char* what) {
  std::istringstream in(bytes);
  NamedTensors out;
  const auto n = get<std::uint64_t>(in, what);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = get_string(in, what);
    try {
      out.emplace_back(std::move(name), read_tensor(in));
    } catch (const Error& e) {
      throw IngestError(std::string("checkpoint: bad tensor in ") + what + ": " + e.what());
    }
  }
  return out;
}

void put_section(std::ostream& out, const char (&tag)[5], const std::string& payload) {
  out.write(tag, 4);
  put_string(out, payload);
}

std::string get_section(std::istream& in, const char (&tag)[5]) {
  char seen[4];
  in.read(seen, 4);
  if (!in) throw IngestError(std::string("checkpoint: missing section ") + tag);
  if (std::memcmp(seen, tag, 4) != 0) {
    throw IngestError(std::string("checkpoint: expected section ") + tag + ", found '" + std::string(seen, 4) + "'");
  }
  return get_string(in, tag);
}

void copy_into(const Tensor& src, Tensor dst, const std::string& name) {
  if (src.shape() != dst.shape() || src.dtype() != dst.dtype()) {
    throw MismatchError("checkpoint: '" + name + "' is " + shape_str(src.shape()) + " " + dtype_name(src.dtype()) +
                        ", model expects " + shape_str(dst.shape()) + " " + dtype_name(dst.dtype()));
  }
  dispatch(dst.dtype(), [&]<class T>() {
    auto s = src.data<T>();
    auto d = dst.mutable_data<T>();
    std::copy(s.begin(), s.end(), d.begin());
  });
}

template <class List>
void restore_list(const List& live, const NamedTensors& saved, const char* what) {
  if (live.size() != saved.size()) {
    throw MismatchError(std::string("checkpoint: ") + std::to_string(saved.size()) + " " + what + " saved, model has " +
                        std::to_string(live.size()));
  }
  for (std::size_t i = 0; i < live.size(); ++i) {
    if (live[i].name != saved[i].first) {
      throw MismatchError(std::string("checkpoint: ") + what + " " + std::to_string(i) + " is '" + saved[i].first +
                          "', model has '" + live[i].name + "'");
    }
    copy_into(saved[i].second, live[i].tensor, live[i].name);
  }
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  std::ostringstream out;
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put_section(out, "CONF", config_to_text(c.config));
  put_section(out, "VOCB", c.vocabulary);
  put_section(out, "PARM", encode_tensors(c.params));
  put_section(out, "BUFS", encode_tensors(c.buffers));
  put_section(out, "OPTM", c.optimizer);
  std::ostringstream rng;
  put<std::uint64_t>(rng, c.rng_seed);
  put<std::uint64_t>(rng, c.iteration);
  put_section(out, "RNGS", rng.str());
  std::ostringstream prog;
  put<std::uint64_t>(prog, c.iteration);
  put<double>(prog, c.best_metric);
  put<std::uint64_t>(prog, c.best_iteration);
  put_section(out, "PROG", prog.str());
  return out.str();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes);
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IngestError("checkpoint: bad magic");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw IngestError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  try {
    c.config = config_from_text(get_section(in, "CONF"));
  } catch (const ConfigError& e) {
    throw IngestError(std::string("checkpoint: bad config section: ") + e.what());
  }
  c.vocabulary = get_section(in, "VOCB");
  c.params = decode_tensors(get_section(in, "PARM"), "PARM");
  c.buffers = decode_tensors(get_section(in, "BUFS"), "BUFS");
  c.optimizer = get_section(in, "OPTM");
  {
    std::istringstream rng(get_section(in, "RNGS"));
    c.rng_seed = get<std::uint64_t>(rng, "RNGS");
    get<std::uint64_t>(rng, "RNGS");
  }
  {
    std::istringstream prog(get_section(in, "PROG"));
    c.iteration = get<std::uint64_t>(prog, "PROG");
    c.best_metric = get<double>(prog, "PROG");
    c.best_iteration = get<std::uint64_t>(prog, "PROG");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IngestError("checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestError("cannot write checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

NamedTensors snapshot_params(const Model& model) {
  NamedTensors out;
  for (const auto& p : model.parameters()) out.emplace_back(p.name, p.tensor.clone());
  return out;
}

NamedTensors snapshot_buffers(const Model& model) {
  NamedTensors out;
  for (const auto& b : model.buffers()) out.emplace_back(b.name, b.tensor.clone());
  return out;
}

void restore_model(const Model& model, const Checkpoint& ckpt) {
  restore_list(model.parameters(), ckpt.params, "parameters");
  restore_list(model.buffers(), ckpt.buffers, "buffers");
}

void check_compatible(const RunConfig& saved, const RunConfig& current) {
  for (const auto& f : config_fields()) {
    if (f.section != "model") continue;
    const std::string a = f.get(saved), b = f.get(current);
    if (a != b) throw MismatchError("checkpoint was built with " + f.name() + " = " + a + ", config has " + b);
  }
}

Vocabulary checkpoint_vocabulary(const Checkpoint& ckpt) {
  std::istringstream in(ckpt.vocabulary);
  return Vocabulary::read(in);
}

}  // namespace bicap
