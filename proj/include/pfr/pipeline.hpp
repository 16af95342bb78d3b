#pragma once

// Incremental reconstruction session (bootstrap -> step -> flush) and the
// training loop: clip sampling, staggered forward, losses, AdamW.
//
// The session emits frame t-1's outputs when frame t arrives; flush emits the
// final frame through a self-referential decode. Every fed frame is emitted
// exactly once, in order.

#include <chrono>
#include <memory>
#include <optional>

#include "pfr/backbone.hpp"
#include "pfr/gaussians.hpp"
#include "pfr/losses.hpp"
#include "pfr/memory.hpp"
#include "pfr/rasterizer.hpp"
#include "pfr/synthscene.hpp"

namespace pfr {

template <typename T>
struct Model {
  BackboneConfig cfg;
  ParamStore<T> params;
  Backbone<T> net;
  MemoryReadout<T> memory;

  explicit Model(const BackboneConfig& c) : cfg(c) {
    cfg.validate();
    Rng rng(cfg.seed);
    net = Backbone<T>(params, rng, cfg);
    memory = MemoryReadout<T>(params, rng, cfg.dim_enc, cfg.dim_dec, cfg.dim_mem, cfg.mem_depth);
  }

  MemoryConfig default_memory_config() const {
    return {.n_working = 4, .attn_threshold = 5.0, .top_k = 2 * cfg.tokens()};
  }

  void save(const std::string& path) const { save_checkpoint(params.to_checkpoint(), path); }
  void load(const std::string& path) { params.from_checkpoint(load_checkpoint(path)); }
};

template <typename T>
struct Emission {
  int frame_id = -1;
  Tensor<T> pointmap;    // [H,W,3] canonical-frame coordinates
  Tensor<T> conf;        // [H,W], >= 1
  Tensor<T> raw_gauss;   // [H,W, 8+3K]
};

// One reconstruction session over an ordered frame sequence. In compacting
// mode (inference) the tape is rebuilt after every frame so memory stays
// bounded; emission tensors are then only valid until the next call.
template <typename T>
class Session {
 public:
  Session(Model<T>& model, MemoryConfig mem_cfg, bool trainable, bool compact)
      : model_(&model), bank_(mem_cfg), trainable_(trainable), compact_(compact) {
    fresh_tape();
  }

  Tape<T>& tape() { return *tape_; }
  WeightCtx<T>& ctx() { return *ctx_; }
  MemoryBank<T>& bank() { return bank_; }
  int frame_counter() const { return frame_counter_; }
  bool closed() const { return closed_; }

  Emission<T> bootstrap(const std::vector<T>& rgb1, const std::vector<T>& rgb2) {
    if (bootstrapped_) throw StateError("bootstrap called twice");
    auto f1 = model_->net.encode(*ctx_, model_->net.patch_embed(*ctx_, rgb1));
    auto f2 = model_->net.encode(*ctx_, model_->net.patch_embed(*ctx_, rgb2));
    // frame 1's projected encoding stands in for the fused feature
    auto boot_fused = model_->memory.boot(*ctx_, f1);
    auto [h_tgt, h_ref] = model_->net.decode_pair(*ctx_, f2, boot_fused);
    Emission<T> out = emit(0, h_ref);
    bank_.insert(model_->memory.make_key(*ctx_, boot_fused), model_->memory.make_value(*ctx_, h_ref),
                 0);
    prev_query_ = model_->net.query_head(*ctx_, h_tgt, f2);
    prev_encoded_ = f2;
    bootstrapped_ = true;
    frame_counter_ = 2;
    maybe_compact();
    return out;
  }

  Emission<T> step(const std::vector<T>& rgb_t) {
    require_open("step");
    auto fused = model_->memory.query(*ctx_, prev_query_, bank_);
    auto f_t = model_->net.encode(*ctx_, model_->net.patch_embed(*ctx_, rgb_t));
    auto [h_tgt, h_ref] = model_->net.decode_pair(*ctx_, f_t, fused);
    const int emitted = frame_counter_ - 1;
    Emission<T> out = emit(emitted, h_ref);
    bank_.insert(model_->memory.make_key(*ctx_, prev_query_), model_->memory.make_value(*ctx_, h_ref),
                 emitted);
    prev_query_ = model_->net.query_head(*ctx_, h_tgt, f_t);
    prev_encoded_ = f_t;
    ++frame_counter_;
    maybe_compact();
    return out;
  }

  // Final decode: the last frame's own encoding is the target, its memory
  // readout the reference input.
  Emission<T> flush() {
    require_open("flush");
    auto fused = model_->memory.query(*ctx_, prev_query_, bank_);
    auto [h_tgt, h_ref] = model_->net.decode_pair(*ctx_, prev_encoded_, fused);
    Emission<T> out = emit(frame_counter_ - 1, h_ref);
    closed_ = true;
    return out;
  }

 private:
  void require_open(const char* what) const {
    if (!bootstrapped_) throw StateError(std::string(what) + " before bootstrap");
    if (closed_) throw StateError(std::string(what) + " on a closed session");
  }

  Emission<T> emit(int frame_id, const Tensor<T>& h_ref) {
    auto heads = model_->net.out_head(*ctx_, h_ref);
    Emission<T> e;
    e.frame_id = frame_id;
    e.pointmap = heads.pointmap;
    e.conf = heads.conf;
    e.raw_gauss = model_->net.gaussian_head(*ctx_, h_ref);
    return e;
  }

  void fresh_tape() {
    tape_ = std::make_unique<Tape<T>>();
    tape_->recording = trainable_;
    ctx_ = std::make_unique<WeightCtx<T>>(*tape_, model_->params, trainable_);
  }

  void maybe_compact() {
    if (!compact_) return;
    auto keep_pq = prev_query_.val();
    auto keep_pq_shape = prev_query_.shape();
    auto keep_pe = prev_encoded_.val();
    auto keep_pe_shape = prev_encoded_.shape();
    fresh_tape();
    bank_.migrate(*tape_);
    prev_query_ = tape_->constant(keep_pq_shape, std::move(keep_pq));
    prev_encoded_ = tape_->constant(keep_pe_shape, std::move(keep_pe));
  }

  Model<T>* model_;
  std::unique_ptr<Tape<T>> tape_;
  std::unique_ptr<WeightCtx<T>> ctx_;
  MemoryBank<T> bank_;
  Tensor<T> prev_query_, prev_encoded_;
  int frame_counter_ = 0;
  bool trainable_ = false, compact_ = false;
  bool bootstrapped_ = false, closed_ = false;
};

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  int N_train = 5;
  int N_extra = 2;
  int T_min = 5;
  int T_max = 10;
  float th_alpha = 1e-3f;
  float lambda = 0.1f;
  float alpha = 0.4f;
  float lr = 1e-4f;  // toy-scale default; see config files for overrides
  float weight_decay = 0.05f;
  int batch = 4;
  int steps = 2000;
  uint64_t seed = 1;
  float grad_clip = 1.0f;

  void validate() const {
    if (T_min > T_max) throw ValueError("TrainConfig: T_min must be <= T_max");
    if (th_alpha < 0 || lambda < 0 || alpha <= 0) throw ValueError("TrainConfig: thresholds must be >= 0");
    if (N_train < 2) throw ValueError("TrainConfig: N_train must be >= 2");
  }

  nlohmann::json to_json() const {
    return {{"N_train", N_train},   {"N_extra", N_extra},
            {"T_min", T_min},       {"T_max", T_max},
            {"th_alpha", th_alpha}, {"lambda", lambda},
            {"alpha", alpha},       {"lr", lr},
            {"weight_decay", weight_decay}, {"batch", batch},
            {"steps", steps},       {"seed", seed},
            {"grad_clip", grad_clip}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.N_train = j.value("N_train", c.N_train);
    c.N_extra = j.value("N_extra", c.N_extra);
    c.T_min = j.value("T_min", c.T_min);
    c.T_max = j.value("T_max", c.T_max);
    c.th_alpha = j.value("th_alpha", c.th_alpha);
    c.lambda = j.value("lambda", c.lambda);
    c.alpha = j.value("alpha", c.alpha);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch = j.value("batch", c.batch);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.validate();
    return c;
  }
};

struct TrainClip {
  const SceneSample* scene = nullptr;
  std::vector<int> inputs;                 // strictly increasing frame indices
  std::vector<std::vector<int>> extras;    // per adjacent input gap
};

// Uniform start, adjacent gaps uniform in [T_min, T_max], extras uniform
// without replacement strictly inside each gap.
inline TrainClip sample_clip(const SceneSample& scene, const TrainConfig& cfg, Rng& rng) {
  const int total = static_cast<int>(scene.frames.size());
  if (total < cfg.N_train * cfg.T_max)
    throw ValueError(strfmt("sample_clip: scene too short (%d frames, need >= %d)", total,
                            cfg.N_train * cfg.T_max));
  std::vector<int> gaps;
  int span = 0;
  for (int i = 0; i + 1 < cfg.N_train; ++i) {
    gaps.push_back(static_cast<int>(rng.uniform_int(cfg.T_min, cfg.T_max)));
    span += gaps.back();
  }
  const int start = static_cast<int>(rng.uniform_int(0, total - 1 - span));
  TrainClip clip;
  clip.scene = &scene;
  clip.inputs.push_back(start);
  for (int g : gaps) clip.inputs.push_back(clip.inputs.back() + g);
  for (size_t i = 0; i + 1 < clip.inputs.size(); ++i) {
    int lo = clip.inputs[i] + 1, hi = clip.inputs[i + 1] - 1;
    std::vector<int> interior;
    for (int f = lo; f <= hi; ++f) interior.push_back(f);
    std::vector<int> chosen;
    for (int k = 0; k < cfg.N_extra && !interior.empty(); ++k) {
      size_t pick = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(interior.size()) - 1));
      chosen.push_back(interior[pick]);
      interior.erase(interior.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    std::sort(chosen.begin(), chosen.end());
    clip.extras.push_back(std::move(chosen));
  }
  return clip;
}

// Decoupled-weight-decay adaptive-moment optimizer with global-norm clipping.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const ParamStore<T>& ps) {
    m_.resize(ps.entries.size());
    v_.resize(ps.entries.size());
    for (size_t i = 0; i < ps.entries.size(); ++i) {
      m_[i].assign(ps.entries[i].value.size(), T(0));
      v_[i].assign(ps.entries[i].value.size(), T(0));
    }
  }

  void step(ParamStore<T>& ps, const std::vector<std::vector<T>>& grads, T lr, T weight_decay,
            T grad_clip) {
    double norm2 = 0;
    for (const auto& g : grads)
      for (T x : g) norm2 += static_cast<double>(x) * x;
    T scale = T(1);
    if (grad_clip > T(0)) {
      double norm = std::sqrt(norm2);
      if (norm > static_cast<double>(grad_clip)) scale = grad_clip / static_cast<T>(norm);
    }
    ++t_;
    const T b1 = T(0.9), b2 = T(0.999), eps = T(1e-8);
    const T bc1 = T(1) - std::pow(b1, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(b2, static_cast<T>(t_));
    for (size_t i = 0; i < ps.entries.size(); ++i) {
      auto& w = ps.entries[i].value;
      if (grads[i].empty()) continue;
      for (size_t j = 0; j < w.size(); ++j) {
        T g = grads[i][j] * scale;
        m_[i][j] = b1 * m_[i][j] + (T(1) - b1) * g;
        v_[i][j] = b2 * v_[i][j] + (T(1) - b2) * g * g;
        T mh = m_[i][j] / bc1;
        T vh = v_[i][j] / bc2;
        w[j] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * w[j]);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 0;
};

// world-to-camera transform expressed in the canonical (first input view)
// coordinate frame
inline Camera relative_camera(const Camera& view, const Camera& canonical) {
  Camera cam = view;
  cam.pose = view.pose.compose(canonical.pose.inverse());
  return cam;
}

template <typename T>
struct ClipForward {
  std::unique_ptr<Session<T>> session;  // owns the tape and weight leaves
  Tensor<T> loss;
  LossReport report;
};

// Forward + losses for one clip on a fresh session tape.
template <typename T>
ClipForward<T> clip_forward(Model<T>& model, const TrainClip& clip, const TrainConfig& cfg,
                            bool trainable = true) {
  const auto& scene = *clip.scene;
  const Camera canonical = scene.frames[static_cast<size_t>(clip.inputs[0])].cam;
  const int hw = model.cfg.image_size;
  const int pixels = hw * hw;

  auto session_ptr =
      std::make_unique<Session<T>>(model, model.default_memory_config(), trainable, false);
  Session<T>& session = *session_ptr;
  std::vector<Emission<T>> emissions;
  auto frame_rgb = [&](int idx) {
    const auto& img = scene.frames[static_cast<size_t>(idx)].rgb.rgb;
    return std::vector<T>(img.begin(), img.end());
  };
  emissions.push_back(session.bootstrap(frame_rgb(clip.inputs[0]), frame_rgb(clip.inputs[1])));
  for (size_t i = 2; i < clip.inputs.size(); ++i)
    emissions.push_back(session.step(frame_rgb(clip.inputs[i])));
  emissions.push_back(session.flush());

  // ground truth for input frames
  std::vector<std::vector<float>> gt_pm;
  std::vector<ValidityMask> valid;
  std::vector<const float*> gt_ptrs;
  for (int idx : clip.inputs) {
    const Frame& f = scene.frames[static_cast<size_t>(idx)];
    gt_pm.push_back(build_pointmap(f, canonical));
    valid.push_back(f.validity);
  }
  for (auto& pm : gt_pm) gt_ptrs.push_back(pm.data());
  const double z_gt = scale_factor_value(gt_ptrs, valid, static_cast<size_t>(pixels));

  std::vector<Tensor<T>> pred_pms;
  for (auto& e : emissions) pred_pms.push_back(e.pointmap);
  auto z_pred = scale_factor<T>(pred_pms, valid);

  std::vector<Tensor<T>> l_regrs, confs;
  for (size_t t = 0; t < emissions.size(); ++t) {
    l_regrs.push_back(regr_loss(gt_pm[t], z_gt, emissions[t].pointmap, z_pred, valid[t]));
    confs.push_back(reshape(emissions[t].conf, {pixels}));
  }
  auto l_conf = conf_loss_frames(l_regrs, confs, valid, static_cast<T>(cfg.alpha));

  // differentiable global field, rescaled into ground-truth metric units
  Tape<T>& tp = session.tape();
  const int K = model.cfg.sh_coeffs();
  const int gc = model.cfg.gauss_channels();
  std::vector<Tensor<T>> mus, scales, rots, opacities, shs;
  for (auto& e : emissions) {
    auto raw = reshape(e.raw_gauss, {pixels, gc});
    mus.push_back(reshape(e.pointmap, {pixels, 3}));
    scales.push_back(clamp(exp_(slice_cols(raw, 0, 3)), T(kScaleMin), T(kScaleMax)));
    rots.push_back(l2_normalize_rows(slice_cols(raw, 3, 4)));
    opacities.push_back(sigmoid(slice_cols(raw, 7, 1)));
    shs.push_back(slice_cols(raw, 8, 3 * K));
  }
  auto scale_ratio = div(tp.scalar(static_cast<T>(z_gt)), z_pred);
  GaussianTensors<T> field;
  field.mu = mul(concat_rows(mus), scale_ratio);
  field.scale = mul(concat_rows(scales), scale_ratio);
  field.rot = concat_rows(rots);
  field.opacity = reshape(concat_rows(opacities), {static_cast<int>(emissions.size()) * pixels});
  field.sh = concat_rows(shs);

  // photometric supervision over input + extra views
  std::vector<int> render_views = clip.inputs;
  for (const auto& gap : clip.extras) render_views.insert(render_views.end(), gap.begin(), gap.end());
  Tensor<T> l_mmse_sum = tp.scalar(T(0));
  double masked_fraction = 0;
  RenderOptions opt;
  for (int view_idx : render_views) {
    const Frame& f = scene.frames[static_cast<size_t>(view_idx)];
    Camera cam = relative_camera(f.cam, canonical);
    auto out = rasterize(field, cam, model.cfg.sh_degree, opt);
    auto mm = masked_mse(f.rgb.rgb, out.rgb, out.alpha.val(), cfg.th_alpha);
    l_mmse_sum = add(l_mmse_sum, mm.loss);
    masked_fraction += mm.masked_fraction;
  }
  auto l_mmse = mul_scalar(l_mmse_sum, T(1) / static_cast<T>(render_views.size()));
  auto total = total_loss(l_conf, l_mmse, static_cast<T>(cfg.lambda));

  ClipForward<T> out;
  out.session = std::move(session_ptr);
  out.loss = total;
  out.report.l_conf = static_cast<double>(l_conf.item());
  out.report.l_mmse = static_cast<double>(l_mmse.item());
  out.report.total = static_cast<double>(total.item());
  out.report.z_pred = static_cast<double>(z_pred.item());
  out.report.z_gt = z_gt;
  out.report.masked_fraction = masked_fraction / static_cast<double>(render_views.size());
  return out;
}

// One optimizer step over a batch of clips. Throws NumericError (naming the
// offending term) without touching the weights if any forward value goes
// non-finite.
template <typename T>
LossReport train_step(Model<T>& model, AdamW<T>& opt, const std::vector<TrainClip>& clips,
                      const TrainConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<T>> grads(model.params.entries.size());
  LossReport avg;
  for (const auto& clip : clips) {
    auto fwd = clip_forward(model, clip, cfg, true);
    fwd.session->tape().backward(fwd.loss);
    std::vector<std::vector<T>> g;
    fwd.session->ctx().collect_grads(g);
    for (size_t i = 0; i < grads.size(); ++i) {
      if (g[i].empty()) continue;
      if (grads[i].empty()) grads[i].assign(g[i].size(), T(0));
      for (size_t j = 0; j < g[i].size(); ++j) grads[i][j] += g[i][j];
    }
    avg.l_conf += fwd.report.l_conf;
    avg.l_mmse += fwd.report.l_mmse;
    avg.total += fwd.report.total;
    avg.z_pred += fwd.report.z_pred;
    avg.z_gt += fwd.report.z_gt;
    avg.masked_fraction += fwd.report.masked_fraction;
  }
  const double inv = 1.0 / static_cast<double>(clips.size());
  for (auto& g : grads)
    for (auto& x : g) x = static_cast<T>(x * inv);
  avg.l_conf *= inv;
  avg.l_mmse *= inv;
  avg.total *= inv;
  avg.z_pred *= inv;
  avg.z_gt *= inv;
  avg.masked_fraction *= inv;
  opt.step(model.params, grads, static_cast<T>(cfg.lr), static_cast<T>(cfg.weight_decay),
           static_cast<T>(cfg.grad_clip));
  avg.step_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return avg;
}

// ---------------------------------------------------------------------------
// inference

struct ReconstructResult {
  GaussianField field;  // pre-prune, canonical frame = first input view
  int frames = 0;
  double seconds = 0;
  double fps = 0;
};

// Streaming reconstruction of an ordered image sequence with bounded memory.
template <typename T>
ReconstructResult reconstruct_sequence(Model<T>& model, const std::vector<Image>& images,
                                       std::optional<MemoryConfig> mem_cfg = std::nullopt) {
  if (images.size() < 2) throw ValueError("reconstruct: sequence of >= 2 frames required");
  const int hw = model.cfg.image_size;
  for (const auto& im : images)
    if (im.width != hw || im.height != hw)
      throw ValueError(strfmt("reconstruct: expected %dx%d images, got %dx%d", hw, hw, im.width,
                              im.height));
  auto t0 = std::chrono::steady_clock::now();
  Session<T> session(model, mem_cfg.value_or(model.default_memory_config()), false, true);
  ReconstructResult result;
  result.field.sh_degree = model.cfg.sh_degree;
  result.field.canonical_frame = 0;

  auto consume = [&](const Emission<T>& e) {
    std::vector<float> raw(e.raw_gauss.val().begin(), e.raw_gauss.val().end());
    std::vector<float> pm(e.pointmap.val().begin(), e.pointmap.val().end());
    std::vector<float> conf(e.conf.val().begin(), e.conf.val().end());
    accumulate(result.field, activate(raw, pm, conf, hw, hw, model.cfg.sh_degree, e.frame_id), 0);
  };
  auto to_t = [](const Image& im) { return std::vector<T>(im.rgb.begin(), im.rgb.end()); };

  consume(session.bootstrap(to_t(images[0]), to_t(images[1])));
  for (size_t i = 2; i < images.size(); ++i) consume(session.step(to_t(images[i])));
  consume(session.flush());

  result.frames = static_cast<int>(images.size());
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.fps = result.seconds > 0 ? static_cast<double>(result.frames) / result.seconds : 0.0;
  return result;
}

}  // namespace pfr
