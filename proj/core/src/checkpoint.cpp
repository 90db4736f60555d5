#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "widthlab/errors.hpp"
#include "widthlab/train_state.hpp"
#include "widthlab/version.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

namespace widthlab {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'W', 'L', 'C', 'K'};

uint64_t fnv1a(const uint8_t* data, size_t n, uint64_t h = 14695981039346656037ull) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

void put_bytes(std::vector<uint8_t>& out, const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename U>
void put_scalar(std::vector<uint8_t>& out, U v) {
  put_bytes(out, &v, sizeof(U));
}

struct Reader {
  const std::vector<uint8_t>* bytes;
  size_t pos = 0;

  void read(void* p, size_t n) {
    if (pos + n > bytes->size()) throw LoadError("checkpoint: truncated payload");
    std::memcpy(p, bytes->data() + pos, n);
    pos += n;
  }

  template <typename U>
  U scalar() {
    U v;
    read(&v, sizeof(U));
    return v;
  }
};

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_head", c.d_head},
              {"context_length", c.context_length},
              {"vocab_size", c.vocab_size},
              {"mlp_multiplier", c.mlp_multiplier},
              {"dropout_p", c.dropout_p},
              {"tied_head", c.tied_head}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int64_t>();
  c.d_model = j.at("d_model").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.d_head = j.at("d_head").get<int64_t>();
  c.context_length = j.at("context_length").get<int64_t>();
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  c.mlp_multiplier = j.at("mlp_multiplier").get<double>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.tied_head = j.at("tied_head").get<bool>();
  return c;
}

std::string sched_kind_name(SchedKind k) {
  switch (k) {
    case SchedKind::kWarmupCosine: return "warmup_cosine";
    case SchedKind::kConstant: return "constant";
    case SchedKind::kFreshCosine: return "fresh_cosine";
  }
  throw LoadError("checkpoint: unknown scheduler kind");
}

SchedKind sched_kind_from(const std::string& s) {
  if (s == "warmup_cosine") return SchedKind::kWarmupCosine;
  if (s == "constant") return SchedKind::kConstant;
  if (s == "fresh_cosine") return SchedKind::kFreshCosine;
  throw LoadError("checkpoint: unknown scheduler kind '" + s + "'");
}

json meta_to_json(const TrainState& st) {
  json j;
  j["config"] = config_to_json(st.config);
  j["optim"] = {{"beta1", st.optim.hyper.beta1},     {"beta2", st.optim.hyper.beta2},
                {"eps", st.optim.hyper.eps},         {"weight_decay", st.optim.hyper.weight_decay},
                {"grad_clip", st.optim.hyper.grad_clip}, {"t", st.optim.t}};
  j["sched"] = {{"kind", sched_kind_name(st.sched.kind)}, {"base_lr", st.sched.base_lr},
                {"min_lr", st.sched.min_lr},              {"warmup_steps", st.sched.warmup_steps},
                {"total_steps", st.sched.total_steps},    {"offset", st.sched.offset}};
  const Rng::State rs = st.rng.state();
  j["rng"] = {{"s", rs.s}, {"has_spare", rs.has_spare}, {"spare_bits", rs.spare_bits}};
  if (st.widen_meta.has_value()) {
    const WidenMetadata& wm = *st.widen_meta;
    json records = json::array();
    for (const auto& [name, rec] : wm.records) {
      json axes = json::array();
      for (const WidenAxis& a : rec.axes) {
        axes.push_back({{"axis", a.axis},
                        {"parent_dim", a.parent_dim},
                        {"factor", a.factor},
                        {"block", a.block}});
      }
      records.push_back({{"name", name},
                         {"kind", rec.kind == MapKind::kClone ? "clone" : "refslice"},
                         {"scale", rec.scale},
                         {"axes", axes}});
    }
    j["widen_meta"] = {{"recipe", wm.recipe},
                       {"m", wm.m},
                       {"perturb_sigma", wm.perturb_sigma},
                       {"records", records}};
  } else {
    j["widen_meta"] = nullptr;
  }
  j["recipe"] = st.recipe;
  j["provenance"] = st.provenance;
  j["parent_fingerprint"] = st.parent_fingerprint;
  return j;
}

void meta_from_json(const json& j, TrainState& st) {
  st.config = config_from_json(j.at("config"));
  const json& o = j.at("optim");
  st.optim.hyper.beta1 = o.at("beta1").get<double>();
  st.optim.hyper.beta2 = o.at("beta2").get<double>();
  st.optim.hyper.eps = o.at("eps").get<double>();
  st.optim.hyper.weight_decay = o.at("weight_decay").get<double>();
  st.optim.hyper.grad_clip = o.at("grad_clip").get<double>();
  st.optim.t = o.at("t").get<int64_t>();
  const json& s = j.at("sched");
  st.sched.kind = sched_kind_from(s.at("kind").get<std::string>());
  st.sched.base_lr = s.at("base_lr").get<double>();
  st.sched.min_lr = s.at("min_lr").get<double>();
  st.sched.warmup_steps = s.at("warmup_steps").get<int64_t>();
  st.sched.total_steps = s.at("total_steps").get<int64_t>();
  st.sched.offset = s.at("offset").get<int64_t>();
  const json& r = j.at("rng");
  Rng::State rs;
  rs.s = r.at("s").get<std::array<uint64_t, 4>>();
  rs.has_spare = r.at("has_spare").get<bool>();
  rs.spare_bits = r.at("spare_bits").get<uint64_t>();
  st.rng = Rng::from_state(rs);
  const json& wm = j.at("widen_meta");
  if (wm.is_null()) {
    st.widen_meta.reset();
  } else {
    WidenMetadata meta;
    meta.recipe = wm.at("recipe").get<std::string>();
    meta.m = wm.at("m").get<int64_t>();
    meta.perturb_sigma = wm.at("perturb_sigma").get<double>();
    for (const json& rec : wm.at("records")) {
      TensorWidenRecord tr;
      const std::string kind = rec.at("kind").get<std::string>();
      if (kind == "clone") {
        tr.kind = MapKind::kClone;
      } else if (kind == "refslice") {
        tr.kind = MapKind::kRefSlice;
      } else {
        throw LoadError("checkpoint: unknown widen record kind '" + kind + "'");
      }
      tr.scale = rec.at("scale").get<double>();
      for (const json& a : rec.at("axes")) {
        WidenAxis ax;
        ax.axis = a.at("axis").get<int>();
        ax.parent_dim = a.at("parent_dim").get<int64_t>();
        ax.factor = a.at("factor").get<int64_t>();
        ax.block = a.at("block").get<int64_t>();
        tr.axes.push_back(ax);
      }
      meta.records.emplace_back(rec.at("name").get<std::string>(), tr);
    }
    st.widen_meta = std::move(meta);
  }
  st.recipe = j.at("recipe").get<std::string>();
  st.provenance = j.at("provenance").get<std::string>();
  st.parent_fingerprint = j.at("parent_fingerprint").get<uint64_t>();
}

void put_tensor(std::vector<uint8_t>& out, const std::string& name, const TensorF& t) {
  put_scalar<uint32_t>(out, static_cast<uint32_t>(name.size()));
  put_bytes(out, name.data(), name.size());
  put_scalar<uint8_t>(out, 0);  // dtype f32
  put_scalar<uint32_t>(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_scalar<uint64_t>(out, static_cast<uint64_t>(t.dim(i)));
  const size_t payload = t.data.size() * sizeof(float);
  const size_t start = out.size();
  put_bytes(out, t.data.data(), payload);
  put_scalar<uint64_t>(out, fnv1a(out.data() + start, payload));
}

TensorF read_tensor(Reader& r, const std::string& expect_name,
                    const std::vector<int64_t>& expect_dims) {
  const uint32_t name_len = r.scalar<uint32_t>();
  std::string name(name_len, '\0');
  r.read(name.data(), name_len);
  if (name != expect_name)
    throw LoadError("checkpoint: tensor '" + name + "' where '" + expect_name + "' expected");
  const uint8_t dtype = r.scalar<uint8_t>();
  if (dtype != 0) throw LoadError("checkpoint: unsupported dtype for '" + name + "'");
  const uint32_t rank = r.scalar<uint32_t>();
  std::vector<int64_t> dims(rank);
  for (auto& d : dims) d = static_cast<int64_t>(r.scalar<uint64_t>());
  if (dims != expect_dims)
    throw LoadError("checkpoint: shape mismatch with embedded config for '" + name + "'");
  TensorF t(dims);
  const size_t payload = t.data.size() * sizeof(float);
  if (r.pos + payload > r.bytes->size()) throw LoadError("checkpoint: truncated tensor payload");
  const uint64_t sum = fnv1a(r.bytes->data() + r.pos, payload);
  r.read(t.data.data(), payload);
  if (r.scalar<uint64_t>() != sum)
    throw LoadError("checkpoint: checksum mismatch for '" + name + "'");
  return t;
}

}  // namespace

std::vector<uint8_t> save_checkpoint(const TrainState& state) {
  std::vector<uint8_t> out;
  put_bytes(out, kMagic, 4);
  put_scalar<uint32_t>(out, kCheckpointVersion);
  const std::string meta = meta_to_json(state).dump();
  put_scalar<uint64_t>(out, meta.size());
  put_bytes(out, meta.data(), meta.size());

  const auto layout = param_layout(state.config);
  put_scalar<uint32_t>(out, static_cast<uint32_t>(3 * layout.size()));
  for (size_t i = 0; i < layout.size(); ++i)
    put_tensor(out, "param." + layout[i].name, state.params[static_cast<int64_t>(i)]);
  for (size_t i = 0; i < layout.size(); ++i)
    put_tensor(out, "m." + layout[i].name, state.optim.m[static_cast<int64_t>(i)]);
  for (size_t i = 0; i < layout.size(); ++i)
    put_tensor(out, "v." + layout[i].name, state.optim.v[static_cast<int64_t>(i)]);
  return out;
}

TrainState load_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r{&bytes};
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw LoadError("checkpoint: bad magic");
  const uint32_t version = r.scalar<uint32_t>();
  if (version != kCheckpointVersion) throw LoadError("checkpoint: unsupported version");
  const uint64_t meta_len = r.scalar<uint64_t>();
  if (r.pos + meta_len > bytes.size()) throw LoadError("checkpoint: truncated metadata");
  std::string meta(meta_len, '\0');
  r.read(meta.data(), meta_len);

  TrainState st;
  try {
    meta_from_json(nlohmann::json::parse(meta), st);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  st.config.validate();

  const auto layout = param_layout(st.config);
  const uint32_t n = r.scalar<uint32_t>();
  if (n != 3 * layout.size()) throw LoadError("checkpoint: unexpected tensor count");
  st.params.tensors.clear();
  st.optim.m.tensors.clear();
  st.optim.v.tensors.clear();
  for (const auto& spec : layout)
    st.params.tensors.push_back(read_tensor(r, "param." + spec.name, spec.dims));
  for (const auto& spec : layout)
    st.optim.m.tensors.push_back(read_tensor(r, "m." + spec.name, spec.dims));
  for (const auto& spec : layout)
    st.optim.v.tensors.push_back(read_tensor(r, "v." + spec.name, spec.dims));
  if (r.pos != bytes.size()) throw LoadError("checkpoint: trailing bytes");
  return st;
}

void save_checkpoint_file(const TrainState& state, const std::string& path) {
  const std::vector<uint8_t> bytes = save_checkpoint(state);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot open checkpoint for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw LoadError("checkpoint write failed: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw LoadError("checkpoint rename failed: " + path);
}

TrainState load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

uint64_t fingerprint(const std::vector<uint8_t>& bytes) { return fnv1a(bytes.data(), bytes.size()); }

}  // namespace widthlab
