#include "picnn/arch.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "picnn/error.hpp"
#include "picnn/util.hpp"

namespace picnn {

namespace {

constexpr std::array<SpaceKind, 4> kSpaceKinds{SpaceKind::cnn_stack, SpaceKind::unet_entire, SpaceKind::unet_cell,
                                               SpaceKind::chain};
constexpr std::array<OpKind, 13> kOpKinds{OpKind::conv3,    OpKind::conv5,    OpKind::conv7,    OpKind::dsconv3,
                                          OpKind::dsconv5,  OpKind::dsconv7,  OpKind::identity, OpKind::maxpool3,
                                          OpKind::avgpool3, OpKind::maxpool2, OpKind::avgpool2, OpKind::bilinear,
                                          OpKind::nearest};

bool is_conv(OpKind k) { return k <= OpKind::dsconv7; }
bool is_separable(OpKind k) { return k >= OpKind::dsconv3 && k <= OpKind::dsconv7; }
std::size_t kernel_size(OpKind k) {
  switch (k) {
    case OpKind::conv3: case OpKind::dsconv3: return 3;
    case OpKind::conv5: case OpKind::dsconv5: return 5;
    case OpKind::conv7: case OpKind::dsconv7: return 7;
    default: return 0;
  }
}

std::vector<OpKind> conv_ops(bool with7) {
  if (with7) return {OpKind::conv3, OpKind::conv5, OpKind::conv7, OpKind::dsconv3, OpKind::dsconv5, OpKind::dsconv7};
  return {OpKind::conv3, OpKind::conv5, OpKind::dsconv3, OpKind::dsconv5};
}

Tensor uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  Tensor t = Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor filled(std::size_t n, double value) {
  Tensor t = Tensor::full({n}, value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

std::string_view to_string(SpaceKind k) {
  switch (k) {
    case SpaceKind::cnn_stack: return "cnn_stack";
    case SpaceKind::unet_entire: return "unet_entire";
    case SpaceKind::unet_cell: return "unet_cell";
    case SpaceKind::chain: return "chain";
  }
  return "cnn_stack";
}

SpaceKind space_kind_from_string(std::string_view name) {
  if (name == "cnn") return SpaceKind::cnn_stack;
  if (name == "unet") return SpaceKind::unet_entire;
  if (name == "cell") return SpaceKind::unet_cell;
  for (auto k : kSpaceKinds) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown search space '" + std::string(name) + "'");
}

std::string_view to_string(OpKind k) {
  switch (k) {
    case OpKind::conv3: return "conv3";
    case OpKind::conv5: return "conv5";
    case OpKind::conv7: return "conv7";
    case OpKind::dsconv3: return "dsconv3";
    case OpKind::dsconv5: return "dsconv5";
    case OpKind::dsconv7: return "dsconv7";
    case OpKind::identity: return "identity";
    case OpKind::maxpool3: return "maxpool3";
    case OpKind::avgpool3: return "avgpool3";
    case OpKind::maxpool2: return "maxpool2";
    case OpKind::avgpool2: return "avgpool2";
    case OpKind::bilinear: return "bilinear";
    case OpKind::nearest: return "nearest";
  }
  return "identity";
}

OpKind op_kind_from_string(std::string_view name) {
  for (auto k : kOpKinds) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown operation '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// spaces

SearchSpace SearchSpace::make(SpaceKind kind, bool one_shot) {
  SearchSpace s;
  s.kind = kind;
  const std::vector<OpKind> pools{OpKind::identity, OpKind::maxpool3, OpKind::avgpool3};
  const std::vector<OpKind> down{OpKind::maxpool2, OpKind::avgpool2};
  const std::vector<OpKind> up{OpKind::bilinear, OpKind::nearest};
  const std::vector<OpKind> unet_convs = conv_ops(false);
  switch (kind) {
    case SpaceKind::cnn_stack:
      for (std::size_t i = 0; i < s.channels.size(); ++i) {
        s.slots.push_back({"conv" + std::to_string(i + 1), conv_ops(!one_shot)});
        if (i + 1 < s.channels.size()) s.slots.push_back({"pool" + std::to_string(i + 1), pools});
      }
      break;
    case SpaceKind::unet_entire:
      s.slots.push_back({"enc0_conv1", unet_convs});
      s.slots.push_back({"enc0_conv2", unet_convs});
      for (std::size_t l = 1; l <= s.depth; ++l) {
        const std::string p = "enc" + std::to_string(l) + "_";
        s.slots.push_back({p + "down", down});
        s.slots.push_back({p + "conv1", unet_convs});
        s.slots.push_back({p + "conv2", unet_convs});
      }
      for (std::size_t l = s.depth; l >= 1; --l) {
        const std::string p = "dec" + std::to_string(l) + "_";
        s.slots.push_back({p + "up", up});
        s.slots.push_back({p + "conv1", unet_convs});
        s.slots.push_back({p + "conv2", unet_convs});
      }
      break;
    case SpaceKind::unet_cell:
      s.slots = {{"down_cell_sample", down}, {"down_cell_conv1", unet_convs}, {"down_cell_conv2", unet_convs},
                 {"up_cell_sample", up},     {"up_cell_conv1", unet_convs},   {"up_cell_conv2", unet_convs}};
      break;
    case SpaceKind::chain:
      throw ConfigError("SearchSpace::make: use SearchSpace::chain for chain spaces");
  }
  return s;
}

SearchSpace SearchSpace::chain(std::vector<Slot> slots, std::size_t channels) {
  SearchSpace s;
  s.kind = SpaceKind::chain;
  s.slots = std::move(slots);
  s.channels = {channels};
  for (const auto& slot : s.slots) {
    if (slot.candidates.empty()) throw ConfigError("chain space: slot '" + slot.name + "' has no candidates");
    for (OpKind op : slot.candidates) {
      if (op == OpKind::maxpool2 || op == OpKind::avgpool2 || op == OpKind::bilinear || op == OpKind::nearest) {
        throw ConfigError("chain space: only shape-preserving ops are allowed");
      }
    }
  }
  return s;
}

std::vector<std::size_t> SearchSpace::slot_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& s : slots) out.push_back(s.candidates.size());
  return out;
}

double SearchSpace::log10_size() const {
  double acc = 0.0;
  for (const auto& s : slots) acc += std::log10(static_cast<double>(s.candidates.size()));
  return acc;
}

void to_json(nlohmann::json& j, const SearchSpace& s) {
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& slot : s.slots) {
    std::vector<std::string> ops;
    for (OpKind op : slot.candidates) ops.emplace_back(to_string(op));
    slots.push_back({{"name", slot.name}, {"candidates", ops}});
  }
  j = {{"kind", to_string(s.kind)}, {"slots", slots}, {"channels", s.channels}, {"width", s.width},
       {"depth", s.depth}};
}

void from_json(const nlohmann::json& j, SearchSpace& s) {
  try {
    const SpaceKind kind = space_kind_from_string(j.at("kind").get<std::string>());
    s = kind == SpaceKind::chain ? SearchSpace{} : SearchSpace::make(kind);
    s.kind = kind;
    if (j.contains("slots")) {
      s.slots.clear();
      for (const auto& e : j.at("slots")) {
        Slot slot;
        slot.name = e.at("name").get<std::string>();
        for (const auto& op : e.at("candidates")) slot.candidates.push_back(op_kind_from_string(op.get<std::string>()));
        s.slots.push_back(std::move(slot));
      }
    }
    s.channels = j.value("channels", s.channels);
    s.width = j.value("width", s.width);
    s.depth = j.value("depth", s.depth);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("search space: ") + e.what());
  }
  for (const auto& slot : s.slots) {
    if (slot.candidates.empty()) throw ConfigError("search space: slot '" + slot.name + "' has no candidates");
  }
}

void validate_genome(const SearchSpace& space, const ArchGenome& genome) {
  if (genome.size() != space.slots.size()) {
    throw ConfigError("genome has " + std::to_string(genome.size()) + " choices, space has " +
                      std::to_string(space.slots.size()) + " slots");
  }
  for (std::size_t i = 0; i < genome.size(); ++i) {
    if (genome[i] >= space.slots[i].candidates.size()) {
      throw ConfigError("genome choice " + std::to_string(genome[i]) + " out of range for slot '" +
                        space.slots[i].name + "'");
    }
  }
}

nlohmann::json genome_to_json(const SearchSpace& space, const ArchGenome& genome) {
  validate_genome(space, genome);
  std::vector<std::string> ops;
  for (std::size_t i = 0; i < genome.size(); ++i) ops.emplace_back(to_string(space.slots[i].candidates[genome[i]]));
  return {{"space", to_string(space.kind)}, {"choices", genome}, {"ops", ops}};
}

ArchGenome genome_from_json(const SearchSpace& space, const nlohmann::json& j) {
  ArchGenome g;
  try {
    g = j.at("choices").get<ArchGenome>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("architecture genome: ") + e.what());
  }
  validate_genome(space, g);
  return g;
}

std::string genome_string(const SearchSpace& space, const ArchGenome& genome) {
  std::ostringstream out;
  for (std::size_t i = 0; i < genome.size(); ++i) {
    if (i) out << ' ';
    out << to_string(space.slots[i].candidates[genome[i]]);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// network

Network::Network(const SearchSpace& space, const NetworkOptions& options, const std::vector<std::vector<bool>>& active)
    : space_(space), options_(options) {
  const std::size_t in = options.in_channels, out = options.out_channels, w = space.width, d = space.depth;
  if (in == 0 || out == 0) throw ConfigError("network: channel counts must be positive");
  std::uint64_t fixed_tag = 0;
  switch (space.kind) {
    case SpaceKind::cnn_stack: {
      if (space.slots.size() != 2 * space.channels.size() - 1) throw ConfigError("cnn_stack: slot count mismatch");
      std::size_t c = in;
      for (std::size_t i = 0; i < space.channels.size(); ++i) {
        add_site(2 * i, 0, c, space.channels[i], active);
        c = space.channels[i];
        if (i + 1 < space.channels.size()) add_site(2 * i + 1, 0, c, c, active);
      }
      fixed_.push_back(make_fixed_conv(c, out, 3, false, fixed_tag++));
      break;
    }
    case SpaceKind::unet_entire: {
      if (space.slots.size() != 2 + 6 * d) throw ConfigError("unet_entire: slot count mismatch");
      std::size_t slot = 0;
      add_site(slot++, 0, in, w, active);
      add_site(slot++, 0, w, w, active);
      for (std::size_t l = 1; l <= d; ++l) {
        add_site(slot++, l, w, w, active);
        add_site(slot++, l, w, w, active);
        add_site(slot++, l, w, w, active);
      }
      for (std::size_t l = d; l >= 1; --l) {
        add_site(slot++, l, w, w, active);
        add_site(slot++, l, 2 * w, w, active);
        add_site(slot++, l, w, w, active);
      }
      fixed_.push_back(make_fixed_conv(w, out, 1, false, fixed_tag++));
      break;
    }
    case SpaceKind::unet_cell: {
      if (space.slots.size() != 6) throw ConfigError("unet_cell: slot count mismatch");
      fixed_.push_back(make_fixed_conv(in, w, 3, true, fixed_tag++));
      for (std::size_t l = 1; l <= d; ++l) {
        add_site(0, l, w, w, active);
        add_site(1, l, w, w, active);
        add_site(2, l, w, w, active);
      }
      for (std::size_t l = d; l >= 1; --l) {
        add_site(3, l, w, w, active);
        add_site(4, l, 2 * w, w, active);
        add_site(5, l, w, w, active);
      }
      fixed_.push_back(make_fixed_conv(w, out, 1, false, fixed_tag++));
      break;
    }
    case SpaceKind::chain: {
      const std::size_t c = space.channels.empty() ? in : space.channels.front();
      if (c != in || c != out) throw ConfigError("chain network: in/out channels must equal the chain width");
      for (std::size_t s = 0; s < space.slots.size(); ++s) add_site(s, 0, c, c, active);
      break;
    }
  }
}

void Network::add_site(std::size_t slot, std::size_t stage, std::size_t in, std::size_t out,
                       const std::vector<std::vector<bool>>& active) {
  Site site;
  site.info = {slot, stage, in, out};
  const std::size_t index = sites_.size();
  const bool norm = space_.kind == SpaceKind::unet_entire || space_.kind == SpaceKind::unet_cell;
  const auto& cands = space_.slots[slot].candidates;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    if (!active[slot][k]) {
      site.ops.emplace_back();
      continue;
    }
    OpParams p;
    const OpKind op = cands[k];
    if (is_conv(op)) {
      Rng rng(derive_seed(options_.seed, "site-op", index * 64 + k));
      const std::size_t ks = kernel_size(op);
      if (is_separable(op)) {
        p.tensors.push_back(uniform({in, 1, ks, ks}, 1.0 / static_cast<double>(ks), rng));
        p.tensors.push_back(uniform({out, in, 1, 1}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        p.tensors.push_back(uniform({out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * ks * ks));
        p.tensors.push_back(uniform({out, in, ks, ks}, bound, rng));
        p.tensors.push_back(uniform({out}, bound, rng));
      }
      if (norm) {
        p.tensors.push_back(filled(out, 1.0));
        p.tensors.push_back(filled(out, 0.0));
      }
    } else if (in != out) {
      throw ConfigError("network: parameter-free op '" + std::string(to_string(op)) + "' cannot change channels");
    }
    site.ops.emplace_back(std::move(p));
  }
  site_info_.push_back(site.info);
  sites_.push_back(std::move(site));
}

Network::OpParams Network::make_fixed_conv(std::size_t in, std::size_t out, std::size_t k, bool norm,
                                           std::uint64_t tag) {
  Rng rng(derive_seed(options_.seed, "fixed", tag));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
  OpParams p;
  p.tensors.push_back(uniform({out, in, k, k}, bound, rng));
  p.tensors.push_back(uniform({out}, bound, rng));
  if (norm) {
    p.tensors.push_back(filled(out, 1.0));
    p.tensors.push_back(filled(out, 0.0));
  }
  return p;
}

Network Network::build(const SearchSpace& space, const ArchGenome& genome, const NetworkOptions& options) {
  validate_genome(space, genome);
  std::vector<std::vector<bool>> active;
  for (std::size_t s = 0; s < space.slots.size(); ++s) {
    active.emplace_back(space.slots[s].candidates.size(), false);
    active.back()[genome[s]] = true;
  }
  Network net(space, options, active);
  net.genome_ = genome;
  // dry run on a probe that survives every downsampling stage
  NoGradGuard guard;
  const std::size_t probe = space.kind == SpaceKind::unet_entire || space.kind == SpaceKind::unet_cell
                                ? std::size_t{1} << (space.depth + 1)
                                : 8;
  Tensor y = net.forward(Tensor::zeros({1, options.in_channels, probe, probe}));
  if (y.dim(1) != options.out_channels || y.dim(2) != probe || y.dim(3) != probe) {
    throw ShapeError("network dry run produced " + shape_str(y.shape()));
  }
  return net;
}

Network Network::supernet(const SearchSpace& space, const NetworkOptions& options) {
  std::vector<std::vector<bool>> active;
  for (const auto& s : space.slots) active.emplace_back(s.candidates.size(), true);
  return Network(space, options, active);
}

Tensor Network::fixed_conv(const OpParams& p, const Tensor& x, bool norm, bool act) const {
  const std::size_t k = p.tensors[0].dim(2);
  Tensor y = conv2d(x, p.tensors[0], p.tensors[1], 1, PaddingSpec::same(k, options_.cols));
  if (norm) {
    const std::size_t c = y.dim(1);
    y = group_norm(y, std::gcd(options_.norm_groups, c), p.tensors[2], p.tensors[3]);
  }
  return act ? gelu(y) : y;
}

Tensor Network::apply_op(OpKind op, const OpParams* params, const Tensor& x, const Tensor* skip) const {
  if (is_conv(op)) {
    if (!params) throw std::logic_error("network: op '" + std::string(to_string(op)) + "' is not instantiated");
    const auto& t = params->tensors;
    const std::size_t ks = kernel_size(op);
    const PaddingSpec pad = PaddingSpec::same(ks, options_.cols);
    Tensor y;
    std::size_t next;
    if (is_separable(op)) {
      y = depthwise_separable_conv2d(x, t[0], t[1], t[2], 1, pad);
      next = 3;
    } else {
      y = conv2d(x, t[0], t[1], 1, pad);
      next = 2;
    }
    switch (space_.kind) {
      case SpaceKind::cnn_stack: return relu(y);
      case SpaceKind::chain: return y;
      default: return gelu(group_norm(y, std::gcd(options_.norm_groups, y.dim(1)), t[next], t[next + 1]));
    }
  }
  switch (op) {
    case OpKind::identity: return x;
    case OpKind::maxpool3: return maxpool2d(x, 3, 1, PaddingSpec::same(3, options_.cols));
    case OpKind::avgpool3: return avgpool2d(x, 3, 1, PaddingSpec::same(3, options_.cols));
    case OpKind::maxpool2: return maxpool2d(x, 2, 2);
    case OpKind::avgpool2: return avgpool2d(x, 2, 2);
    case OpKind::bilinear:
    case OpKind::nearest: {
      if (!skip) throw std::logic_error("network: upsampling needs a target resolution");
      return upsample_to(x, op == OpKind::bilinear ? UpsampleMode::bilinear : UpsampleMode::nearest, skip->dim(2),
                         skip->dim(3));
    }
    default: break;
  }
  throw std::logic_error("network: unhandled op");
}

Tensor Network::run(const Tensor& x, const Choice& choice) const {
  if (x.ndim() != 4 || x.dim(1) != options_.in_channels) {
    throw ShapeError("network: expected input [N," + std::to_string(options_.in_channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  std::size_t site = 0;
  auto next = [&](const Tensor& h, const Tensor* skip = nullptr) { return choice(site++, h, skip); };
  const std::size_t d = space_.depth;
  switch (space_.kind) {
    case SpaceKind::cnn_stack: {
      Tensor h = x;
      while (site < sites_.size()) h = next(h);
      return fixed_conv(fixed_[0], h, false, false);
    }
    case SpaceKind::chain: {
      Tensor h = x;
      while (site < sites_.size()) h = next(h);
      return h;
    }
    case SpaceKind::unet_entire:
    case SpaceKind::unet_cell: {
      const bool cell = space_.kind == SpaceKind::unet_cell;
      Tensor h;
      if (cell) {
        h = fixed_conv(fixed_[0], x, true, true);
      } else {
        h = next(x);
        h = next(h);
      }
      std::vector<Tensor> skips{h};
      for (std::size_t l = 1; l <= d; ++l) {
        Tensor s = next(h);
        Tensor n1 = next(s);
        Tensor n2 = next(n1);
        h = cell ? add(n1, n2) : n2;
        if (l < d) skips.push_back(h);
      }
      for (std::size_t l = d; l >= 1; --l) {
        const Tensor& skip = skips[l - 1];
        Tensor s = concat_channels(next(h, &skip), skip);
        Tensor n1 = next(s);
        Tensor n2 = next(n1);
        h = cell ? add(n1, n2) : n2;
      }
      return fixed_conv(fixed_.back(), h, false, false);
    }
  }
  throw std::logic_error("network: unknown space kind");
}

Tensor Network::forward(const Tensor& x) const {
  if (!genome_) throw std::logic_error("Network::forward: supernets need an explicit genome");
  return forward(x, *genome_);
}

Tensor Network::forward(const Tensor& x, const ArchGenome& genome) const {
  validate_genome(space_, genome);
  return run(x, [&](std::size_t i, const Tensor& h, const Tensor* skip) {
    const Site& s = sites_[i];
    const std::size_t k = genome[s.info.slot];
    const auto& p = s.ops[k];
    return apply_op(space_.slots[s.info.slot].candidates[k], p ? &*p : nullptr, h, skip);
  });
}

Tensor Network::forward_mixed(const Tensor& x, const std::vector<Tensor>& probs) const {
  if (probs.size() != space_.slots.size()) throw ShapeError("forward_mixed: one probability vector per slot");
  for (std::size_t s = 0; s < probs.size(); ++s) {
    if (probs[s].numel() != space_.slots[s].candidates.size()) {
      throw ShapeError("forward_mixed: slot '" + space_.slots[s].name + "' probability length mismatch");
    }
  }
  return run(x, [&](std::size_t i, const Tensor& h, const Tensor* skip) {
    const Site& s = sites_[i];
    const auto& cands = space_.slots[s.info.slot].candidates;
    Tensor acc;
    for (std::size_t k = 0; k < cands.size(); ++k) {
      const auto& p = s.ops[k];
      Tensor term = mul(select(probs[s.info.slot], k), apply_op(cands[k], p ? &*p : nullptr, h, skip));
      acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
  });
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> out;
  for (const auto& site : sites_) {
    for (const auto& op : site.ops) {
      if (op) out.insert(out.end(), op->tensors.begin(), op->tensors.end());
    }
  }
  for (const auto& f : fixed_) out.insert(out.end(), f.tensors.begin(), f.tensors.end());
  return out;
}

std::vector<Tensor> Network::parameters(const ArchGenome& genome) const {
  validate_genome(space_, genome);
  std::vector<Tensor> out;
  for (const auto& site : sites_) {
    const auto& op = site.ops[genome[site.info.slot]];
    if (op) out.insert(out.end(), op->tensors.begin(), op->tensors.end());
  }
  for (const auto& f : fixed_) out.insert(out.end(), f.tensors.begin(), f.tensors.end());
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

}  // namespace picnn
