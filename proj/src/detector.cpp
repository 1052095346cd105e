#include "aligndet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "aligndet/errors.hpp"
#include "aligndet/fusion.hpp"

namespace aligndet {

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw ValidationError("model.image_size must be a positive multiple of model.patch_size");
  if (hidden_dim <= 0 || num_heads <= 0 || hidden_dim % num_heads != 0)
    throw ValidationError("model.hidden_dim must be divisible by model.num_heads");
  if (hidden_dim % 8 != 0) throw ValidationError("model.hidden_dim must be a multiple of 8");
  if (encoder_layers < 0 || decoder_layers < 0)
    throw ValidationError("model layer counts must be >= 0");
  if (num_object_queries < 1) throw ValidationError("model.num_object_queries must be >= 1");
  if (d_text < 1) throw ValidationError("model.d_text must be >= 1");
}

ad::Matrix inverse_sigmoid(const ad::Matrix& x, double eps) {
  return x.unaryExpr([eps](double v) {
    v = std::clamp(v, eps, 1.0 - eps);
    return std::log(v / (1.0 - v));
  });
}

Boxd center_row_to_box(const ad::Matrix& boxes, Eigen::Index row) {
  return from_center_form<double>({boxes(row, 0), boxes(row, 1), boxes(row, 2), boxes(row, 3)});
}

DecoderQueryBlock DecoderQueryBlock::make(int num_object, const std::vector<NoisySample>& samples) {
  DecoderQueryBlock b;
  b.num_object = num_object;
  const auto a = static_cast<Eigen::Index>(samples.size());
  b.aux_reference.resize(a, 4);
  for (Eigen::Index k = 0; k < a; ++k) {
    const auto c = to_center_form(samples[static_cast<std::size_t>(k)].box);
    for (int j = 0; j < 4; ++j) b.aux_reference(k, j) = c[static_cast<std::size_t>(j)];
  }
  const Eigen::Index n = num_object + a;
  b.attention_mask = ad::BoolMatrix::Constant(n, n, true);
  b.attention_mask.block(0, num_object, num_object, a).setConstant(false);
  return b;
}

namespace {

// 2D sin/cos encoding of patch centers: first half x, second half y.
ad::Matrix image_positional(int grid, int d) {
  const int per_axis = d / 2;
  const int nf = per_axis / 2;
  ad::Matrix pe(grid * grid, d);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int t = gy * grid + gx;
      const double cx = (gx + 0.5) / grid, cy = (gy + 0.5) / grid;
      for (int k = 0; k < nf; ++k) {
        const double f = ad::sine_frequency(k, nf);
        pe(t, 2 * k) = std::sin(f * cx);
        pe(t, 2 * k + 1) = std::cos(f * cx);
        pe(t, per_axis + 2 * k) = std::sin(f * cy);
        pe(t, per_axis + 2 * k + 1) = std::cos(f * cy);
      }
    }
  return pe;
}

void add_linear(ParameterStore& s, const std::string& name, int in, int out, Rng& rng,
                bool zero = false) {
  s.add(name + ".w", zero ? ad::Matrix::Zero(in, out) : xavier(in, out, rng));
  s.add(name + ".b", ad::Matrix::Zero(1, out));
}

void add_norm(ParameterStore& s, const std::string& name, int d) {
  s.add(name + ".g", ad::Matrix::Ones(1, d));
  s.add(name + ".b", ad::Matrix::Zero(1, d));
}

void add_attention(ParameterStore& s, const std::string& name, int d, Rng& rng) {
  for (const char* n : {"q", "k", "v", "o"}) add_linear(s, name + "." + n, d, d, rng);
}

}  // namespace

Detector::Detector(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(cfg_.seed, 0xde7));
  const int d = cfg_.hidden_dim;
  add_linear(params_, "backbone.embed", cfg_.patch_dim(), d, rng);
  add_linear(params_, "text.proj", cfg_.d_text, d, rng);
  // Classification prior of 0.01.
  params_.add("cls.bias", ad::Matrix::Constant(1, 1, -std::log(99.0)));

  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    add_norm(params_, p + ".ln1", d);
    add_attention(params_, p + ".attn", d, rng);
    add_norm(params_, p + ".ln2", d);
    add_linear(params_, p + ".ffn1", d, cfg_.ffn_dim, rng);
    add_linear(params_, p + ".ffn2", cfg_.ffn_dim, d, rng);
  }
  add_norm(params_, "enc.norm", d);
  add_linear(params_, "enc.box.l1", d, d, rng);
  add_linear(params_, "enc.box.l2", d, 4, rng, true);

  params_.add("dec.query", gaussian(cfg_.num_object_queries, d, 1.0, rng));
  params_.add("dec.aux_query", gaussian(1, d, 1.0, rng));
  add_linear(params_, "dec.pos.l1", d, d, rng);
  add_linear(params_, "dec.pos.l2", d, d, rng);
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    add_norm(params_, p + ".ln1", d);
    add_attention(params_, p + ".self", d, rng);
    add_norm(params_, p + ".ln2", d);
    add_attention(params_, p + ".cross", d, rng);
    add_norm(params_, p + ".ln3", d);
    add_linear(params_, p + ".ffn1", d, cfg_.ffn_dim, rng);
    add_linear(params_, p + ".ffn2", cfg_.ffn_dim, d, rng);
  }
  add_norm(params_, "dec.norm", d);
  add_linear(params_, "dec.box.l1", d, d, rng);
  add_linear(params_, "dec.box.l2", d, 4, rng, true);

  positional_ = image_positional(cfg_.grid(), d);
  ad::Matrix anchors(cfg_.num_tokens(), 4);
  for (int gy = 0; gy < cfg_.grid(); ++gy)
    for (int gx = 0; gx < cfg_.grid(); ++gx)
      anchors.row(gy * cfg_.grid() + gx) << (gx + 0.5) / cfg_.grid(), (gy + 0.5) / cfg_.grid(),
          cfg_.anchor_size, cfg_.anchor_size;
  anchors_ = inverse_sigmoid(anchors);
}

void Detector::enable_fusion(std::uint64_t seed) {
  if (!fusion_enabled()) fusion::add_parameters(params_, cfg_.d_text, cfg_.hidden_dim, seed);
}

bool Detector::fusion_enabled() const { return fusion::present(params_); }

ad::Var Detector::mlp(ad::Tape& tape, ad::Var x, const std::string& prefix) const {
  auto P = [&](const std::string& n) { return tape.param(params_.at(prefix + n)); };
  const ad::Var h = ad::gelu(ad::linear(x, P(".l1.w"), P(".l1.b")));
  return ad::linear(h, P(".l2.w"), P(".l2.b"));
}

ad::Var Detector::backbone_forward(ad::Tape& tape, const Image& image) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size ||
      image.channels != cfg_.channels)
    throw ShapeError("image is " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + "x" + std::to_string(image.channels) +
                     ", model expects " + std::to_string(cfg_.image_size) + "x" +
                     std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.channels));
  const int g = cfg_.grid(), ps = cfg_.patch_size, c = cfg_.channels;
  ad::Matrix patches(cfg_.num_tokens(), cfg_.patch_dim());
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const int t = gy * g + gx;
      int k = 0;
      for (int dy = 0; dy < ps; ++dy)
        for (int dx = 0; dx < ps; ++dx)
          for (int ch = 0; ch < c; ++ch) patches(t, k++) = image.at(gy * ps + dy, gx * ps + dx, ch);
    }
  const ad::Var x = tape.constant(std::move(patches));
  const ad::Var e = ad::linear(x, tape.param(params_.at("backbone.embed.w")),
                               tape.param(params_.at("backbone.embed.b")));
  return ad::add(e, tape.constant(positional_));
}

ad::Var Detector::project_text(ad::Tape& tape, const Eigen::MatrixXd& prompts) const {
  if (prompts.rows() < 1 || prompts.cols() != cfg_.d_text)
    throw ShapeError("prompt embeddings must be P x d_text with P >= 1");
  return ad::linear(tape.constant(prompts), tape.param(params_.at("text.proj.w")),
                    tape.param(params_.at("text.proj.b")));
}

ad::Var Detector::self_block(ad::Tape& tape, ad::Var x, const std::string& p) const {
  auto P = [&](const std::string& n) { return tape.param(params_.at(p + n)); };
  const ad::Var h = ad::layer_norm(x, P(".ln1.g"), P(".ln1.b"));
  const ad::Var q = ad::linear(h, P(".attn.q.w"), P(".attn.q.b"));
  const ad::Var k = ad::linear(h, P(".attn.k.w"), P(".attn.k.b"));
  const ad::Var v = ad::linear(h, P(".attn.v.w"), P(".attn.v.b"));
  const ad::Var a = ad::linear(ad::attention(q, k, v, cfg_.num_heads), P(".attn.o.w"), P(".attn.o.b"));
  x = ad::add(x, a);
  const ad::Var f = ad::layer_norm(x, P(".ln2.g"), P(".ln2.b"));
  const ad::Var ff = ad::linear(ad::gelu(ad::linear(f, P(".ffn1.w"), P(".ffn1.b"))), P(".ffn2.w"),
                                P(".ffn2.b"));
  return ad::add(x, ff);
}

ad::Var Detector::encoder_forward(ad::Tape& tape, ad::Var tokens) const {
  if (tokens.cols() != cfg_.hidden_dim) throw ShapeError("encoder: token width differs from d");
  for (int l = 0; l < cfg_.encoder_layers; ++l)
    tokens = self_block(tape, tokens, "enc." + std::to_string(l));
  return ad::layer_norm(tokens, tape.param(params_.at("enc.norm.g")),
                        tape.param(params_.at("enc.norm.b")));
}

ad::Var Detector::classify(ad::Var features, ad::Var projected_text) const {
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
  return ad::add_scalar(ad::scale(ad::matmul_nt(features, projected_text), s),
                        features.tape()->param(params_.at("cls.bias")));
}

QuerySelection Detector::select_queries(ad::Tape& tape, ad::Var tokens, ad::Var ptext,
                                        const std::vector<int>* forced) const {
  const ad::Var logits = classify(tokens, ptext);
  const Eigen::Index t = tokens.rows();
  QuerySelection sel;
  if (forced) {
    sel.indices = *forced;
  } else {
    const Eigen::VectorXd best = logits.value().rowwise().maxCoeff();
    std::vector<int> order(static_cast<std::size_t>(t));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return best(a) > best(b); });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg_.num_object_queries)));
    sel.indices = std::move(order);
  }
  const ad::Var chosen = ad::gather_rows(tokens, sel.indices);
  ad::Matrix anchor(static_cast<Eigen::Index>(sel.indices.size()), 4);
  for (std::size_t i = 0; i < sel.indices.size(); ++i)
    anchor.row(static_cast<Eigen::Index>(i)) = anchors_.row(sel.indices[i]);
  sel.ref_logits = ad::add(mlp(tape, chosen, "enc.box"), tape.constant(std::move(anchor)));
  sel.proposals.obj_logits = ad::gather_rows(logits, sel.indices);
  sel.proposals.obj_boxes = ad::sigmoid(sel.ref_logits);
  return sel;
}

std::vector<LevelOutput> Detector::decoder_forward(ad::Tape& tape, ad::Var memory,
                                                   ad::Var ref_logits,
                                                   const DecoderQueryBlock& block,
                                                   ad::Var ptext) const {
  const int nq = static_cast<int>(ref_logits.rows());
  const int na = block.num_aux();
  if (block.num_object != nq || block.attention_mask.rows() != nq + na ||
      block.attention_mask.cols() != nq + na)
    throw ShapeError("decoder: query block does not match the selected queries");
  if (na > cfg_.max_aux_queries) throw ShapeError("decoder: too many auxiliary queries");
  // Object rows must not see auxiliary columns; the object stream is then
  // evaluated on object keys alone, so its arithmetic cannot depend on the
  // auxiliary block.
  if (na > 0 && block.attention_mask.block(0, nq, nq, na).any())
    throw ShapeError("decoder: mask lets object queries attend to auxiliary queries");
  const ad::BoolMatrix obj_mask = block.attention_mask.block(0, 0, nq, nq);
  const bool obj_full = obj_mask.all();
  const ad::BoolMatrix aux_mask = block.attention_mask.block(nq, 0, na, nq + na);
  const bool aux_full = aux_mask.all();

  auto P = [&](const std::string& n) { return tape.param(params_.at(n)); };
  const int d = cfg_.hidden_dim;
  const int h = cfg_.num_heads;

  struct Stream {
    ad::Var content;
    ad::Var ref;  // inverse-sigmoid space
    ad::Var boxes;
  };
  Stream obj{ad::gather_rows(P("dec.query"), [&] {
               std::vector<int> r(static_cast<std::size_t>(nq));
               std::iota(r.begin(), r.end(), 0);
               return r;
             }()),
             ref_logits, ad::sigmoid(ref_logits)};
  if (nq > cfg_.num_object_queries) throw ShapeError("decoder: too many object queries");
  Stream aux;
  if (na > 0) {
    aux.content = ad::repeat_row(P("dec.aux_query"), na);
    aux.ref = tape.constant(inverse_sigmoid(block.aux_reference));
    aux.boxes = ad::sigmoid(aux.ref);
  }

  auto pos_of = [&](ad::Var boxes) { return mlp(tape, ad::sine_embed(boxes, d / 4), "dec.pos"); };
  auto proj = [&](ad::Var x, const std::string& p) {
    return ad::linear(x, P(p + ".w"), P(p + ".b"));
  };

  std::vector<LevelOutput> levels;
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    const ad::Var pos_o = pos_of(obj.boxes);
    ad::Var pos_a;
    if (na > 0) pos_a = pos_of(aux.boxes);

    // Masked self-attention.
    const ad::Var xo = ad::layer_norm(obj.content, P(p + ".ln1.g"), P(p + ".ln1.b"));
    const ad::Var qko = ad::add(xo, pos_o);
    const ad::Var qo = proj(qko, p + ".self.q"), ko = proj(qko, p + ".self.k"),
                  vo = proj(xo, p + ".self.v");
    const ad::Var so = ad::attention(qo, ko, vo, h, obj_full ? nullptr : &obj_mask);
    obj.content = ad::add(obj.content, proj(so, p + ".self.o"));
    if (na > 0) {
      const ad::Var xa = ad::layer_norm(aux.content, P(p + ".ln1.g"), P(p + ".ln1.b"));
      const ad::Var qka = ad::add(xa, pos_a);
      const ad::Var qa = proj(qka, p + ".self.q");
      const ad::Var ka = proj(qka, p + ".self.k"), va = proj(xa, p + ".self.v");
      const std::array<ad::Var, 2> kk{ko, ka}, vv{vo, va};
      const ad::Var sa = ad::attention(qa, ad::concat_rows(kk), ad::concat_rows(vv), h,
                                       aux_full ? nullptr : &aux_mask);
      aux.content = ad::add(aux.content, proj(sa, p + ".self.o"));
    }

    // Cross-attention to image tokens, then feed-forward; row-wise per stream.
    const ad::Var mk = proj(memory, p + ".cross.k"), mv = proj(memory, p + ".cross.v");
    auto rest = [&](Stream& s, ad::Var pos) {
      const ad::Var x = ad::layer_norm(s.content, P(p + ".ln2.g"), P(p + ".ln2.b"));
      const ad::Var q = proj(ad::add(x, pos), p + ".cross.q");
      s.content = ad::add(s.content, proj(ad::attention(q, mk, mv, h), p + ".cross.o"));
      const ad::Var f = ad::layer_norm(s.content, P(p + ".ln3.g"), P(p + ".ln3.b"));
      s.content = ad::add(s.content, proj(ad::gelu(proj(f, p + ".ffn1")), p + ".ffn2"));
      const ad::Var out = ad::layer_norm(s.content, P("dec.norm.g"), P("dec.norm.b"));
      s.ref = ad::add(s.ref, mlp(tape, out, "dec.box"));
      s.boxes = ad::sigmoid(s.ref);
      return classify(out, ptext);
    };
    LevelOutput lv;
    lv.obj_logits = rest(obj, pos_o);
    lv.obj_boxes = obj.boxes;
    if (na > 0) {
      lv.aux_logits = rest(aux, pos_a);
      lv.aux_boxes = aux.boxes;
    }
    levels.push_back(lv);
  }
  return levels;
}

ForwardOutput Detector::forward(ad::Tape& tape, const Image& image,
                                const Eigen::MatrixXd& prompts, const DecoderQueryBlock& block,
                                const std::vector<int>* forced_selection) const {
  ad::Var tokens = backbone_forward(tape, image);
  if (fusion_enabled())
    tokens = fusion::fuse(tape, tokens, tape.constant(prompts), params_, cfg_.num_heads);
  const ad::Var memory = encoder_forward(tape, tokens);
  const ad::Var ptext = project_text(tape, prompts);
  QuerySelection sel = select_queries(tape, memory, ptext, forced_selection);
  ForwardOutput out;
  out.selected = sel.indices;
  out.levels.push_back(sel.proposals);
  auto dec = decoder_forward(tape, memory, sel.ref_logits, block, ptext);
  out.levels.insert(out.levels.end(), dec.begin(), dec.end());
  return out;
}

std::vector<Detection> Detector::inference(const Image& image, const Eigen::MatrixXd& prompts,
                                           int top_k) const {
  ad::Tape tape(false);
  const int nq = std::min(cfg_.num_object_queries, cfg_.num_tokens());
  const ForwardOutput fo = forward(tape, image, prompts, DecoderQueryBlock::objects_only(nq));
  const LevelOutput& last = fo.levels.back();
  const ad::Matrix probs =
      last.obj_logits.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  std::vector<Detection> dets;
  for (Eigen::Index q = 0; q < probs.rows(); ++q)
    dets.push_back({center_row_to_box(last.obj_boxes.value(), q), probs.row(q).transpose(),
                    static_cast<int>(q)});
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    return a.max_score() > b.max_score();
  });
  if (static_cast<int>(dets.size()) > top_k) dets.resize(static_cast<std::size_t>(top_k));
  return dets;
}

}  // namespace aligndet
