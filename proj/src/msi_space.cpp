#include "msinet/msi_space.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "msinet/error.hpp"
#include "msinet/numerics/ops.hpp"
#include "util/atomic_file.hpp"

namespace msinet {

char op_code(InteractionOp op) {
  switch (op) {
    case InteractionOp::None: return 'N';
    case InteractionOp::Exchange: return 'E';
    case InteractionOp::ChannelGate: return 'G';
    case InteractionOp::CrossAttention: return 'A';
  }
  throw InternalError("op_code: bad operator");
}

InteractionOp op_from_code(char code) {
  switch (code) {
    case 'N': return InteractionOp::None;
    case 'E': return InteractionOp::Exchange;
    case 'G': return InteractionOp::ChannelGate;
    case 'A': return InteractionOp::CrossAttention;
    default: throw ArgumentError(std::string("unknown interaction code '") + code + "' (expected N, E, G or A)");
  }
}

std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::Sum: return "sum";
    case Fusion::Minus: return "minus";
    case Fusion::Mul: return "mul";
  }
  throw InternalError("fusion_name: bad fusion");
}

Fusion parse_fusion(const std::string& name) {
  if (name == "sum") return Fusion::Sum;
  if (name == "minus") return Fusion::Minus;
  if (name == "mul") return Fusion::Mul;
  throw ArgumentError("unknown fusion '" + name + "' (expected sum, minus or mul)");
}

void SupernetConfig::validate() const {
  for (std::size_t w : widths)
    if (w == 0) throw ArgumentError("space: widths must be positive");
  if (stem_width == 0) throw ArgumentError("space: stem_width must be positive");
  if (rho == 0) throw ArgumentError("space: rho must be at least 1");
  if (embedding_dim == 0) throw ArgumentError("space: embedding_dim must be positive");
  if (bottleneck == 0) throw ArgumentError("space: bottleneck must be positive");
  if (image_h == 0 || image_w == 0 || image_h % kTotalStride != 0 || image_w % kTotalStride != 0)
    throw ArgumentError("space: image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " must be a positive multiple of " + std::to_string(kTotalStride));
}

std::size_t SupernetConfig::branch_channels(std::size_t width) const {
  return std::max<std::size_t>(1, width / bottleneck);
}

SupernetConfig SupernetConfig::full_scale() {
  SupernetConfig c;
  c.widths = {256, 384, 512};
  c.stem_width = 64;
  c.embedding_dim = 512;
  c.image_h = 256;
  c.image_w = 128;
  return c;
}

std::string ArchDescriptor::ops_string() const {
  std::string s;
  for (std::size_t i = 0; i < kNumSlots; ++i) {
    if (i) s += ' ';
    s += op_code(ops[i]);
  }
  return s;
}

ArchDescriptor msinet_descriptor(const SupernetConfig& config) {
  static constexpr char kTable[] = "GGEGAGGNGAEA";
  ArchDescriptor d;
  for (std::size_t i = 0; i < kNumSlots; ++i) d.ops[i] = op_from_code(kTable[i]);
  d.config = config;
  return d;
}

ArchDescriptor uniform_descriptor(InteractionOp op, const SupernetConfig& config) {
  ArchDescriptor d;
  d.ops.fill(op);
  d.config = config;
  return d;
}

ArchDescriptor random_descriptor(unsigned long long seed, const SupernetConfig& config) {
  Rng rng(seed);
  ArchDescriptor d;
  for (auto& op : d.ops) op = static_cast<InteractionOp>(rng() % kNumOps);
  d.config = config;
  return d;
}

std::string descriptor_to_text(const ArchDescriptor& d) {
  const SupernetConfig& c = d.config;
  std::ostringstream os;
  os << "ops = " << d.ops_string() << '\n'
     << "rho = " << c.rho << '\n'
     << "widths = " << c.widths[0] << ' ' << c.widths[1] << ' ' << c.widths[2] << '\n'
     << "stem_width = " << c.stem_width << '\n'
     << "fusion = " << fusion_name(c.fusion) << '\n'
     << "embedding_dim = " << c.embedding_dim << '\n'
     << "image = " << c.image_h << 'x' << c.image_w << '\n'
     << "bottleneck = " << c.bottleneck << '\n';
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& text, const std::string& where, std::size_t line) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size() || text[0] == '-')
    throw ParseError(where, line, "expected a non-negative integer, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

ArchDescriptor descriptor_from_text(const std::string& text, const std::string& where) {
  ArchDescriptor d;
  std::istringstream is(text);
  std::string raw;
  std::size_t line = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(is, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError(where, line, "expected 'key = value'");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (!seen.emplace(key, line).second) throw ParseError(where, line, "duplicate key '" + key + "'");
    std::istringstream vs(value);
    try {
      if (key == "ops") {
        std::string tok;
        std::size_t n = 0;
        while (vs >> tok) {
          if (tok.size() != 1) throw ParseError(where, line, "operator codes are single letters, got '" + tok + "'");
          if (n >= kNumSlots) throw ParseError(where, line, "more than 12 operator codes");
          d.ops[n++] = op_from_code(tok[0]);
        }
        if (n != kNumSlots) throw ParseError(where, line, "expected 12 operator codes, got " + std::to_string(n));
      } else if (key == "rho") {
        d.config.rho = parse_count(value, where, line);
      } else if (key == "widths") {
        std::string tok;
        std::size_t n = 0;
        while (vs >> tok) {
          if (n >= 3) throw ParseError(where, line, "expected 3 widths");
          d.config.widths[n++] = parse_count(tok, where, line);
        }
        if (n != 3) throw ParseError(where, line, "expected 3 widths");
      } else if (key == "stem_width") {
        d.config.stem_width = parse_count(value, where, line);
      } else if (key == "fusion") {
        d.config.fusion = parse_fusion(value);
      } else if (key == "embedding_dim") {
        d.config.embedding_dim = parse_count(value, where, line);
      } else if (key == "image") {
        const auto x = value.find('x');
        if (x == std::string::npos) throw ParseError(where, line, "image must be HxW");
        d.config.image_h = parse_count(value.substr(0, x), where, line);
        d.config.image_w = parse_count(value.substr(x + 1), where, line);
      } else if (key == "bottleneck") {
        d.config.bottleneck = parse_count(value, where, line);
      } else {
        throw ParseError(where, line, "unknown key '" + key + "'");
      }
    } catch (const ArgumentError& e) {
      throw ParseError(where, line, e.what());
    }
  }
  if (!seen.count("ops")) throw ParseError(where, line, "missing 'ops'");
  try {
    d.config.validate();
  } catch (const ArgumentError& e) {
    throw ParseError(where, line, e.what());
  }
  return d;
}

void save_descriptor(const ArchDescriptor& d, const std::string& path) { write_file_atomic(path, descriptor_to_text(d)); }

ArchDescriptor load_descriptor(const std::string& path) { return descriptor_from_text(read_file(path), path); }

template <typename T>
ArchDescriptor discretize(const Tensor<T>& alpha, const SupernetConfig& config) {
  if (alpha.shape() != Shape{kNumSlots, kNumOps})
    throw ArgumentError("discretize: alpha must be [12,4], got " + shape_to_string(alpha.shape()));
  ArchDescriptor d;
  d.config = config;
  for (std::size_t s = 0; s < kNumSlots; ++s) {
    std::size_t best = 0;
    for (std::size_t o = 1; o < kNumOps; ++o)
      if (alpha[s * kNumOps + o] > alpha[s * kNumOps + best]) best = o;
    d.ops[s] = static_cast<InteractionOp>(best);
  }
  return d;
}

template <typename T>
InteractionParams<T> InteractionParams<T>::create(std::size_t channels, bool with_gate, bool with_attention,
                                                  Rng& rng) {
  InteractionParams p;
  if (with_gate) {
    const std::size_t hidden = std::max<std::size_t>(1, channels / 4);
    p.gate_fc1 = LinearParams<T>::create(channels, hidden, true, 1.0 / std::sqrt(double(channels)), rng);
    p.gate_fc2 = LinearParams<T>::create(hidden, channels, true, 1.0 / std::sqrt(double(hidden)), rng);
  }
  if (with_attention) {
    p.gamma = Tensor<T>({2}, T(0));
    p.gamma->set_requires_grad(true);
  }
  return p;
}

template <typename T>
void InteractionParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  if (gate_fc1) gate_fc1->collect(prefix + ".gate.fc1", out);
  if (gate_fc2) gate_fc2->collect(prefix + ".gate.fc2", out);
  if (gamma) out.push_back({prefix + ".attention.gamma", &*gamma, true});
}

namespace {

template <typename T>
Var<T> channel_gate(Var<T> x, InteractionParams<T>& p) {
  Var<T> h = ops::relu(linear(global_avgpool(x), *p.gate_fc1));
  return ops::channel_scale(x, ops::sigmoid(linear(h, *p.gate_fc2)));
}

// x_q + gamma[idx] * (rowsoftmax(q k^T) q), channels as rows.
template <typename T>
Var<T> cross_attend(Var<T> q, Var<T> k, Var<T> gamma, std::size_t idx) {
  const Shape s = q.shape();
  const Shape flat{s[0], s[1], s[2] * s[3]};
  Var<T> qf = ops::reshape(q, flat);
  Var<T> kf = ops::reshape(k, flat);
  Var<T> mask = ops::softmax(ops::bmm(qf, kf, false, true), 2);
  Var<T> attended = ops::reshape(ops::bmm(mask, qf), s);
  return ops::add(q, ops::scale_by(attended, gamma, idx));
}

}  // namespace

template <typename T>
VarPair<T> interaction_apply(InteractionOp op, Var<T> x1, Var<T> x2, InteractionParams<T>& p) {
  if (x1.shape() != x2.shape())
    throw ArgumentError("interaction: branch shapes differ: " + shape_to_string(x1.shape()) + " vs " +
                        shape_to_string(x2.shape()));
  switch (op) {
    case InteractionOp::None: return {x1, x2};
    case InteractionOp::Exchange: return {x2, x1};
    case InteractionOp::ChannelGate:
      if (!p.gate_fc1 || !p.gate_fc2) throw ArgumentError("interaction: channel gate parameters not materialized");
      return {channel_gate(x1, p), channel_gate(x2, p)};
    case InteractionOp::CrossAttention: {
      if (!p.gamma) throw ArgumentError("interaction: cross attention parameters not materialized");
      if (x1.value().rank() != 4) throw ArgumentError("interaction: cross attention needs [B,C,H,W]");
      Var<T> g = x1.tape->param(*p.gamma);
      return {cross_attend(x1, x2, g, 0), cross_attend(x2, x1, g, 1)};
    }
  }
  throw InternalError("interaction_apply: bad operator");
}

template <typename T>
VarPair<T> mixed_interaction(Var<T> x1, Var<T> x2, Var<T> alpha_row, InteractionParams<T>& p) {
  if (alpha_row.numel() != kNumOps) throw ArgumentError("mixed_interaction: alpha row must have 4 entries");
  Var<T> w = ops::softmax(ops::reshape(alpha_row, Shape{kNumOps}), 0);
  std::optional<Var<T>> y1, y2;
  for (std::size_t o = 0; o < kNumOps; ++o) {
    auto [a, b] = interaction_apply(static_cast<InteractionOp>(o), x1, x2, p);
    Var<T> wa = ops::scale_by(a, w, o);
    Var<T> wb = ops::scale_by(b, w, o);
    y1 = y1 ? ops::add(*y1, wa) : wa;
    y2 = y2 ? ops::add(*y2, wb) : wb;
  }
  return {*y1, *y2};
}

template <typename T>
BranchParams<T> BranchParams<T>::create(std::size_t channels, std::size_t depth, Rng& rng) {
  if (depth == 0) throw ArgumentError("branch: depth must be at least 1");
  BranchParams p;
  p.pointwise = ConvBlock<T>::create(channels, channels, 1, 1, 0, 1, true, rng);
  for (std::size_t i = 0; i < depth; ++i)
    p.depthwise.push_back(ConvBlock<T>::create(channels, channels, 3, 1, 1, channels, true, rng));
  return p;
}

template <typename T>
void BranchParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  pointwise.collect(prefix + ".pw", out);
  for (std::size_t i = 0; i < depthwise.size(); ++i) depthwise[i].collect(prefix + ".dw" + std::to_string(i), out);
}

template <typename T>
Var<T> branch_forward(Var<T> x, BranchParams<T>& p) {
  if (x.value().rank() != 4 || x.shape()[1] != p.pointwise.conv.in_channels())
    throw ArgumentError("branch: input " + shape_to_string(x.shape()) + " does not have " +
                        std::to_string(p.pointwise.conv.in_channels()) + " channels");
  Var<T> y = p.pointwise.forward(x);
  for (auto& block : p.depthwise) y = block.forward(y);
  return y;
}

template <typename T>
CellParams<T> CellParams<T>::create(std::size_t in, std::size_t out, std::size_t mid, std::size_t rho,
                                    const std::optional<std::array<InteractionOp, kSlotsPerCell>>& slot_ops,
                                    Rng& rng) {
  CellParams p;
  p.reduce = ConvBlock<T>::create(in, mid, 1, 1, 0, 1, true, rng);
  for (auto& stage : p.branches) {
    stage[0] = BranchParams<T>::create(mid, rho, rng);
    stage[1] = BranchParams<T>::create(mid, 1, rng);
  }
  for (std::size_t s = 0; s < kSlotsPerCell; ++s) {
    const bool gate = !slot_ops || (*slot_ops)[s] == InteractionOp::ChannelGate;
    const bool attention = !slot_ops || (*slot_ops)[s] == InteractionOp::CrossAttention;
    p.slots[s] = InteractionParams<T>::create(mid, gate, attention, rng);
  }
  p.expand = ConvBlock<T>::create(mid, out, 1, 1, 0, 1, false, rng);
  return p;
}

template <typename T>
void CellParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  reduce.collect(prefix + ".reduce", out);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t b = 0; b < 2; ++b)
      branches[s][b].collect(prefix + ".stage" + std::to_string(s) + ".branch" + std::to_string(b), out);
    slots[s].collect(prefix + ".slot" + std::to_string(s), out);
  }
  expand.collect(prefix + ".expand", out);
}

template <typename T>
Var<T> fuse(Var<T> a, Var<T> b, Fusion f) {
  switch (f) {
    case Fusion::Sum: return ops::add(a, b);
    case Fusion::Minus: return ops::sub(a, b);
    case Fusion::Mul: return ops::mul(a, b);
  }
  throw ArgumentError("fuse: unknown fusion kind");
}

template <typename T>
Var<T> cell_forward(Var<T> x, CellParams<T>& p, const std::array<SlotChoice<T>, kSlotsPerCell>& slots,
                    Fusion fusion) {
  if (x.value().rank() != 4 || x.shape()[1] != p.reduce.conv.in_channels())
    throw ArgumentError("cell: input " + shape_to_string(x.shape()) + " does not have " +
                        std::to_string(p.reduce.conv.in_channels()) + " channels");
  if (fusion != Fusion::Sum && fusion != Fusion::Minus && fusion != Fusion::Mul)
    throw ArgumentError("cell: unknown fusion kind");
  Var<T> r = p.reduce.forward(x);
  Var<T> b1 = r, b2 = r;
  for (std::size_t s = 0; s < kSlotsPerCell; ++s) {
    b1 = branch_forward(b1, p.branches[s][0]);
    b2 = branch_forward(b2, p.branches[s][1]);
    const SlotChoice<T>& c = slots[s];
    VarPair<T> out = c.alpha_row ? mixed_interaction(b1, b2, *c.alpha_row, p.slots[s])
                                 : interaction_apply(c.op, b1, b2, p.slots[s]);
    b1 = out.first;
    b2 = out.second;
  }
  Var<T> y = p.expand.forward(fuse(b1, b2, fusion));
  if (y.shape() == x.shape()) y = ops::add(y, x);
  return ops::relu(y);
}

template <typename T>
Var<T> downsample(Var<T> x, ConvBlock<T>& p) {
  if (x.value().rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0)
    throw ArgumentError("downsample: spatial size of " + shape_to_string(x.shape()) + " must be even");
  return avgpool2d(p.forward(x), 2, 2);
}

namespace {

template <typename T>
MsiNetwork<T> build_network(const SupernetConfig& c, const std::optional<ArchDescriptor>& fixed, Rng& rng) {
  c.validate();
  MsiNetwork<T> n;
  n.config = c;
  n.fixed = fixed;
  n.stem = ConvBlock<T>::create(3, c.stem_width, 7, 2, 3, 1, true, rng);
  std::size_t in = c.stem_width;
  for (std::size_t cell = 0; cell < kNumCells; ++cell) {
    const std::size_t width = c.cell_width(cell);
    if (cell == 2 || cell == 4) {
      n.downs[cell / 2 - 1] = ConvBlock<T>::create(in, width, 1, 1, 0, 1, true, rng);
      in = width;
    }
    std::optional<std::array<InteractionOp, kSlotsPerCell>> slot_ops;
    if (fixed) slot_ops = std::array<InteractionOp, kSlotsPerCell>{fixed->ops[2 * cell], fixed->ops[2 * cell + 1]};
    n.cells[cell] = CellParams<T>::create(in, width, c.branch_channels(width), c.rho, slot_ops, rng);
    in = width;
  }
  if (c.embedding_dim != c.widths[2]) n.head = ConvBlock<T>::create(c.widths[2], c.embedding_dim, 1, 1, 0, 1, true, rng);
  return n;
}

template <typename T>
void check_images(Var<T> images, const SupernetConfig& c) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 3) throw ArgumentError("network: images must be [B,3,H,W], got " + shape_to_string(s));
  if (s[2] % kTotalStride != 0 || s[3] % kTotalStride != 0)
    throw ArgumentError("network: image size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                        " is not divisible by the total stride " + std::to_string(kTotalStride));
  (void)c;
}

// Shared pipeline; `choose(cell, slot)` picks the interaction for each slot.
template <typename T, typename Choose>
NetworkOutput<T> run_network(Var<T> images, MsiNetwork<T>& n, Choose&& choose) {
  check_images(images, n.config);
  Var<T> x = maxpool2d(n.stem.forward(images), 3, 2, 1);
  for (std::size_t cell = 0; cell < kNumCells; ++cell) {
    if (cell == 2 || cell == 4) x = downsample(x, n.downs[cell / 2 - 1]);
    std::array<SlotChoice<T>, kSlotsPerCell> slots{choose(cell, 0), choose(cell, 1)};
    x = cell_forward(x, n.cells[cell], slots, n.config.fusion);
  }
  Var<T> map = x;
  if (n.head) x = n.head->forward(x);
  return {map, global_avgpool(x)};
}

}  // namespace

template <typename T>
MsiNetwork<T> MsiNetwork<T>::supernet(const SupernetConfig& config, Rng& rng) {
  return build_network<T>(config, std::nullopt, rng);
}

template <typename T>
MsiNetwork<T> MsiNetwork<T>::fixed_network(const ArchDescriptor& desc, Rng& rng) {
  return build_network<T>(desc.config, desc, rng);
}

template <typename T>
NamedTensors<T> MsiNetwork<T>::named_tensors() {
  NamedTensors<T> out;
  stem.collect("stem", out);
  for (std::size_t cell = 0; cell < kNumCells; ++cell) {
    if (cell == 2 || cell == 4) downs[cell / 2 - 1].collect("down" + std::to_string(cell / 2 - 1), out);
    cells[cell].collect("cell" + std::to_string(cell), out);
  }
  if (head) head->collect("head", out);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> MsiNetwork<T>::trainable() {
  std::vector<Tensor<T>*> out;
  for (auto& nt : named_tensors())
    if (nt.trainable) out.push_back(nt.tensor);
  return out;
}

template <typename T>
std::size_t MsiNetwork<T>::parameter_count() {
  std::size_t total = 0;
  for (Tensor<T>* t : trainable()) total += t->numel();
  return total;
}

namespace {

template <typename T, typename Fn>
void for_each_norm(MsiNetwork<T>& n, Fn&& fn) {
  auto block = [&](ConvBlock<T>& b) { fn(b.norm); };
  block(n.stem);
  for (auto& d : n.downs) block(d);
  for (auto& c : n.cells) {
    block(c.reduce);
    block(c.expand);
    for (auto& stage : c.branches)
      for (auto& br : stage) {
        block(br.pointwise);
        for (auto& dw : br.depthwise) block(dw);
      }
  }
  if (n.head) block(*n.head);
}

}  // namespace

template <typename T>
void MsiNetwork<T>::set_mode(NormMode mode) {
  for_each_norm(*this, [mode](BatchNormState<T>& s) { s.mode = mode; });
}

template <typename T>
void MsiNetwork<T>::set_update_running(bool on) {
  for_each_norm(*this, [on](BatchNormState<T>& s) { s.update_running = on; });
}

template <typename T>
NetworkOutput<T> supernet_forward(Var<T> images, Var<T> alpha, MsiNetwork<T>& net) {
  if (alpha.shape() != Shape{kNumSlots, kNumOps})
    throw ArgumentError("supernet: alpha must be [12,4], got " + shape_to_string(alpha.shape()));
  if (net.fixed) throw ArgumentError("supernet: weights were built for a fixed architecture");
  std::array<Var<T>, kNumSlots> rows;
  for (std::size_t s = 0; s < kNumSlots; ++s) {
    const std::size_t r[] = {s};
    rows[s] = ops::select_rows(alpha, r);
  }
  return run_network(images, net, [&](std::size_t cell, std::size_t slot) {
    return SlotChoice<T>{rows[cell * kSlotsPerCell + slot], InteractionOp::None};
  });
}

template <typename T>
NetworkOutput<T> fixed_forward(Var<T> images, const ArchDescriptor& desc, MsiNetwork<T>& net) {
  if (!(desc.config == net.config)) throw ArgumentError("fixed_forward: descriptor config does not match the weights");
  return run_network(images, net, [&](std::size_t cell, std::size_t slot) {
    return SlotChoice<T>{std::nullopt, desc.ops[cell * kSlotsPerCell + slot]};
  });
}

#define MSINET_INSTANTIATE_MSI(T)                                                                              \
  template ArchDescriptor discretize(const Tensor<T>&, const SupernetConfig&);                                \
  template struct InteractionParams<T>;                                                                       \
  template struct BranchParams<T>;                                                                            \
  template struct CellParams<T>;                                                                              \
  template struct MsiNetwork<T>;                                                                              \
  template VarPair<T> interaction_apply(InteractionOp, Var<T>, Var<T>, InteractionParams<T>&);                \
  template VarPair<T> mixed_interaction(Var<T>, Var<T>, Var<T>, InteractionParams<T>&);                       \
  template Var<T> branch_forward(Var<T>, BranchParams<T>&);                                                   \
  template Var<T> fuse(Var<T>, Var<T>, Fusion);                                                               \
  template Var<T> cell_forward(Var<T>, CellParams<T>&, const std::array<SlotChoice<T>, kSlotsPerCell>&, Fusion); \
  template Var<T> downsample(Var<T>, ConvBlock<T>&);                                                          \
  template NetworkOutput<T> supernet_forward(Var<T>, Var<T>, MsiNetwork<T>&);                                 \
  template NetworkOutput<T> fixed_forward(Var<T>, const ArchDescriptor&, MsiNetwork<T>&);

MSINET_INSTANTIATE_MSI(float)
MSINET_INSTANTIATE_MSI(double)

}  // namespace msinet
