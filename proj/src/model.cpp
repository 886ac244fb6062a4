#include "roadimp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <numeric>

#include "roadimp/metrics.hpp"

namespace roadimp {

using nlohmann::json;

// ---- model -------------------------------------------------------------------

ImportanceModel::ImportanceModel(const ModelConfig& cfg, uint64_t param_seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(param_seed);
  ofe_ = std::make_shared<Ofe>(cfg_, rng);
  disg_ = std::make_shared<Disg>(cfg_, rng);
  trg_ = std::make_shared<Trg>(cfg_, rng);
  register_module("ofe", ofe_);
  register_module("disg", disg_);
  register_module("trg", trg_);
  const int64_t flat = 2 * cfg_.C * cfg_.roi_size * cfg_.roi_size;
  head_proj_ = std::make_shared<nn::Linear>(flat, cfg_.Cp, rng);
  head_norm_ = std::make_shared<nn::LayerNorm>(cfg_.Cp);
  head_mlp_ = std::make_shared<nn::Mlp>(
      cfg_.Cp, std::vector<int64_t>{std::max<int64_t>(cfg_.Cp / 2, 2), 2}, rng);
  register_module("head_proj", head_proj_);
  register_module("head_norm", head_norm_);
  register_module("head_mlp", head_mlp_);
}

Tensor ImportanceModel::normalize_image(const Tensor& img) const {
  std::vector<double> mean(cfg_.norm_mean.begin(), cfg_.norm_mean.end());
  std::vector<double> inv_std(3);
  for (int i = 0; i < 3; ++i) inv_std[i] = 1.0 / cfg_.norm_std[i];
  Tensor m = Tensor::from_vector({3, 1, 1}, std::move(mean));
  Tensor s = Tensor::from_vector({3, 1, 1}, std::move(inv_std));
  return mul(sub(img, m), s);
}

ImportanceScores ImportanceModel::estimate_importance(const Tensor& f_ois,
                                                      const Tensor& f_ol) {
  RI_CHECK(f_ois.dim() == 4, "estimate_importance: f_ois must be [N,2C,W',H'], got " +
                                 shape_to_string(f_ois.shape()));
  RI_CHECK(f_ol.dim() == 2 && f_ol.size(0) == f_ois.size(0) &&
               f_ol.size(1) == cfg_.Cp,
           "estimate_importance: f_ol must be [N,C'], got " +
               shape_to_string(f_ol.shape()));
  const int64_t N = f_ois.size(0);
  const int64_t flat = f_ois.size(1) * f_ois.size(2) * f_ois.size(3);
  Tensor x = relu(head_norm_->forward(head_proj_->forward(reshape(f_ois, {N, flat}))));
  Tensor logits = head_mlp_->forward(add(x, f_ol));  // [N,2]
  Tensor probs = softmax(logits, 1);
  ImportanceScores scores;
  scores.logits = logits;
  scores.probs = probs;
  scores.A.resize(N);
  for (int64_t i = 0; i < N; ++i) scores.A[i] = probs.data()[i * 2 + 1];
  return scores;
}

ImportanceScores ImportanceModel::forward(const ClipSample& sample) {
  const int64_t N = sample.num_objects();
  RI_CHECK(N >= 1, "forward: clip has no objects");
  RI_CHECK(sample.frames.size(0) == cfg_.T,
           "forward: clip has " + std::to_string(sample.frames.size(0)) +
               " frames but the model expects T=" + std::to_string(cfg_.T));
  last_trace_.clear();
  last_gate_ = GateDecisions{};
  auto trace = [&](const char* name, const Tensor& t) {
    last_trace_.emplace_back(name, t.shape());
  };

  Tensor V = normalize_image(sample.frames);
  Tensor M = normalize_image(sample.flow);
  StreamFeatures sf = ofe_->extract_stream_features(V, M, sample.boxes,
                                                    sample.validity);
  trace("f_v", sf.f_v);
  trace("f_m", sf.f_m);

  const int64_t Wp = cfg_.roi_size;
  Tensor f_os = cfg_.use_spatial
                    ? ofe_->spatial_feature(sf).f_os
                    : Tensor::zeros({N, 2 * cfg_.C, Wp, Wp});
  trace("f_os", f_os);
  Tensor f_ot = cfg_.use_temporal ? ofe_->temporal_feature(sf).f_ot
                                  : Tensor::zeros({N, cfg_.Cp});
  trace("f_ot", f_ot);

  // Top-down pathway 1: driver intention and scene semantics.
  Tensor f_ois = f_os;
  const bool disg_active = cfg_.use_disg && (cfg_.use_semantics || cfg_.use_intention);
  if (disg_active) {
    SemanticFeature f_s =
        cfg_.use_semantics
            ? disg_->semantic_feature(normalize_image(sample.seg_map))
            : SemanticFeature{Tensor::ones({1, 2 * cfg_.C, Wp, Wp})};
    trace("f_s", f_s.f_s);
    Tensor f_is = f_s.f_s;
    if (cfg_.use_intention) {
      const IntentionMask& m =
          select_mask(sample.ego_velocity, cfg_.beta, disg_->masks());
      f_is = fuse_intention_semantics(f_s, m);
    }
    trace("f_is", f_is);
    f_ois = disg_->object_intention_semantics(f_os, f_is);
  }
  trace("f_ois", f_ois);

  // Top-down pathway 2: traffic rule via lane interaction.
  Tensor f_ol = f_ot;
  if (cfg_.use_trg) {
    LaneFeature lf = trg_->lane_feature(sample.lanes, N);
    trace("f_l", lf.f_l);
    Tensor f_ol_m = cfg_.use_interaction
                        ? trg_->object_lane_interaction(lf.f_l, f_ot)
                        : f_ot;
    trace("f_ol_m", f_ol_m);
    Tensor p = trg_->gate_score(f_ol_m);
    trace("p", p);
    Tensor p_c;
    if (cfg_.use_weighting) {
      p_c = penalty_coefficient(p, cfg_.alpha,
                                training() ? GateMode::kSoft : GateMode::kHard,
                                cfg_.soft_k);
      f_ol = apply_gate(f_ol_m, p_c);
    } else {
      p_c = Tensor::ones({N});
      f_ol = f_ol_m;
    }
    trace("p_c", p_c);
    last_gate_.p.assign(p.data(), p.data() + N);
    last_gate_.p_c.assign(p_c.data(), p_c.data() + N);
  }
  trace("f_ol", f_ol);

  ImportanceScores scores = estimate_importance(f_ois, f_ol);
  trace("logits", scores.logits);
  trace("A", Tensor::from_vector({N}, scores.A));
  return scores;
}

// ---- loss -------------------------------------------------------------------

namespace {
Tensor labels_tensor(const std::vector<int>& labels) {
  std::vector<double> y(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] ? 1.0 : 0.0;
  return Tensor::from_vector({static_cast<int64_t>(labels.size())}, std::move(y));
}
}  // namespace

Tensor bce_loss(const Tensor& prob_class1, const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("bce_loss: empty labels");
  RI_CHECK(prob_class1.numel() == static_cast<int64_t>(labels.size()),
           "bce_loss: scores/labels length mismatch");
  Tensor y = labels_tensor(labels);
  Tensor one_minus_y = add_scalar(neg(y), 1.0);
  Tensor a = clamp(prob_class1, kProbEps, 1.0 - kProbEps);
  Tensor term = add(mul(y, log_op(a)),
                    mul(one_minus_y, log_op(add_scalar(neg(a), 1.0))));
  return neg(mean_all(term));
}

Tensor focal_loss(const Tensor& prob_class1, const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("focal_loss: empty labels");
  RI_CHECK(prob_class1.numel() == static_cast<int64_t>(labels.size()),
           "focal_loss: scores/labels length mismatch");
  Tensor y = labels_tensor(labels);
  Tensor one_minus_y = add_scalar(neg(y), 1.0);
  Tensor a = clamp(prob_class1, kProbEps, 1.0 - kProbEps);
  // p_t = A for positives, 1-A for negatives; alpha_t balances the classes.
  Tensor p_t = add(mul(y, a), mul(one_minus_y, add_scalar(neg(a), 1.0)));
  std::vector<double> alpha_t(labels.size());
  for (size_t i = 0; i < labels.size(); ++i)
    alpha_t[i] = labels[i] ? kFocalBalance : 1.0 - kFocalBalance;
  Tensor alpha = Tensor::from_vector({static_cast<int64_t>(labels.size())},
                                     std::move(alpha_t));
  Tensor modulator = pow_scalar(add_scalar(neg(p_t), 1.0), kFocalGamma);
  Tensor term = mul(mul(alpha, modulator), neg(log_op(p_t)));
  return mean_all(term);
}

Tensor ImportanceModel::loss(const ImportanceScores& scores,
                             const std::vector<int>& labels) const {
  if (labels.empty()) throw std::invalid_argument("loss: empty labels");
  const int64_t N = scores.probs.size(0);
  RI_CHECK(N == static_cast<int64_t>(labels.size()),
           "loss: scores/labels length mismatch");
  Tensor a = reshape(narrow(scores.probs, 1, 1, 1), {N});
  return add(bce_loss(a, labels), focal_loss(a, labels));
}

// ---- optimizer -------------------------------------------------------------------

SgdOptimizer::SgdOptimizer(std::vector<std::pair<std::string, Tensor>> params,
                           double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& [name, t] : params_)
    velocity_.emplace_back(name, Tensor::zeros(t.shape()));
}

void SgdOptimizer::step(double lr) {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& theta = params_[i].second;
    Tensor& vel = velocity_[i].second;
    const auto& g = theta.grad();
    if (g.empty()) continue;
    auto& v = vel.vec();
    auto& w = theta.vec();
    for (size_t k = 0; k < w.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k] + weight_decay_ * w[k];
      w[k] -= lr * v[k];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

// ---- checkpoint -------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'I', 'M', 'P', 'C', 'K', 'P', 'T'};

bool host_little_endian() {
  const uint16_t probe = 0x0102;
  return *reinterpret_cast<const uint8_t*>(&probe) == 0x02;
}

void byteswap_doubles(std::vector<double>& v) {
  for (auto& d : v) {
    auto* b = reinterpret_cast<uint8_t*>(&d);
    std::reverse(b, b + sizeof(double));
  }
}

json tensor_index(const std::vector<std::pair<std::string, Tensor>>& ts,
                  const char* kind, uint64_t& offset) {
  json arr = json::array();
  for (const auto& [name, t] : ts) {
    arr.push_back({{"name", name},
                   {"kind", kind},
                   {"shape", t.shape()},
                   {"offset", offset}});
    offset += static_cast<uint64_t>(t.numel()) * sizeof(double);
  }
  return arr;
}

json history_json(const std::vector<EpochStats>& hist) {
  json arr = json::array();
  for (const auto& h : hist)
    arr.push_back({{"epoch", h.epoch},
                   {"loss", h.loss},
                   {"ap", h.ap},
                   {"f1", h.f1},
                   {"acc", h.acc},
                   {"lr", h.lr}});
  return arr;
}

std::vector<EpochStats> history_from_json(const json& arr) {
  std::vector<EpochStats> hist;
  for (const auto& h : arr) {
    EpochStats e;
    e.epoch = h.at("epoch").get<int64_t>();
    e.loss = h.at("loss").get<double>();
    e.ap = h.at("ap").get<double>();
    e.f1 = h.at("f1").get<double>();
    e.acc = h.at("acc").get<double>();
    e.lr = h.at("lr").get<double>();
    hist.push_back(e);
  }
  return hist;
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  RI_CHECK(out.good(), "cannot write checkpoint: " + path.string());
  uint64_t offset = 0;
  json header = {{"version", kVersion},
                 {"config", json::parse(config.to_json())},
                 {"epochs_completed", epochs_completed},
                 {"history", history_json(history)}};
  json tensors = json::array();
  for (const auto& part : tensor_index(params, "param", offset)) tensors.push_back(part);
  for (const auto& part : tensor_index(buffers, "buffer", offset)) tensors.push_back(part);
  for (const auto& part : tensor_index(momentum, "momentum", offset))
    tensors.push_back(part);
  header["tensors"] = tensors;
  const std::string header_text = header.dump();

  out.write(kMagic, sizeof(kMagic));
  uint64_t hlen = header_text.size();
  if (!host_little_endian()) {
    auto* b = reinterpret_cast<uint8_t*>(&hlen);
    std::reverse(b, b + sizeof(hlen));
  }
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  auto write_blob = [&](const std::vector<std::pair<std::string, Tensor>>& ts) {
    for (const auto& [name, t] : ts) {
      if (host_little_endian()) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
      } else {
        std::vector<double> copy(t.vec());
        byteswap_doubles(copy);
        out.write(reinterpret_cast<const char*>(copy.data()),
                  static_cast<std::streamsize>(copy.size() * sizeof(double)));
      }
    }
  };
  write_blob(params);
  write_blob(buffers);
  write_blob(momentum);
  RI_CHECK(out.good(), "checkpoint write failed: " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  RI_CHECK(in.good(), "cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  RI_CHECK(in.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
           "not a checkpoint file: " + path.string());
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!host_little_endian()) {
    auto* b = reinterpret_cast<uint8_t*>(&hlen);
    std::reverse(b, b + sizeof(hlen));
  }
  std::string header_text(hlen, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(hlen));
  RI_CHECK(in.good(), "truncated checkpoint header: " + path.string());
  json header = json::parse(header_text);
  RI_CHECK(header.at("version").get<std::string>() == kVersion,
           "unsupported checkpoint version in " + path.string());

  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_json(header.at("config").dump());
  ckpt.epochs_completed = header.at("epochs_completed").get<int64_t>();
  ckpt.history = history_from_json(header.at("history"));
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    RI_CHECK(in.good(), "truncated checkpoint tensor '" + name + "' in " +
                            path.string());
    if (!host_little_endian()) byteswap_doubles(data);
    auto t = Tensor::from_vector(shape, std::move(data));
    if (kind == "param")
      ckpt.params.emplace_back(name, t);
    else if (kind == "buffer")
      ckpt.buffers.emplace_back(name, t);
    else
      ckpt.momentum.emplace_back(name, t);
  }
  return ckpt;
}

void Checkpoint::install_into(ImportanceModel& model) const {
  auto install = [](const std::vector<std::pair<std::string, Tensor>>& stored,
                    std::vector<std::pair<std::string, Tensor>> live,
                    const char* what) {
    RI_CHECK(stored.size() == live.size(),
             std::string("checkpoint ") + what + " count mismatch: stored " +
                 std::to_string(stored.size()) + ", model has " +
                 std::to_string(live.size()));
    for (size_t i = 0; i < stored.size(); ++i) {
      const auto& [sname, stensor] = stored[i];
      auto it = std::find_if(live.begin(), live.end(),
                             [&](const auto& kv) { return kv.first == sname; });
      RI_CHECK(it != live.end(), std::string("checkpoint ") + what + " '" + sname +
                                     "' not present in model");
      RI_CHECK(it->second.shape() == stensor.shape(),
               std::string("checkpoint ") + what + " '" + sname +
                   "' shape mismatch: stored " + shape_to_string(stensor.shape()) +
                   ", model " + shape_to_string(it->second.shape()));
      it->second.vec() = stensor.vec();
    }
  };
  install(params, model.named_parameters(), "parameter");
  install(buffers, model.named_buffers(), "buffer");
}

std::shared_ptr<ImportanceModel> Checkpoint::restore_model() const {
  auto model = std::make_shared<ImportanceModel>(config, /*param_seed=*/0);
  install_into(*model);
  return model;
}

// ---- training -------------------------------------------------------------------

namespace {

uint64_t epoch_mix(uint64_t seed, int64_t epoch) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(epoch + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct PooledEval {
  double ap = 0.0, f1 = 0.0, acc = 0.0;
};

PooledEval eval_clips(ImportanceModel& model, const std::vector<ClipSample>& clips) {
  NoGradGuard no_grad;
  model.set_train(false);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& clip : clips) {
    ImportanceScores s = model.forward(clip);
    scores.insert(scores.end(), s.A.begin(), s.A.end());
    labels.insert(labels.end(), clip.labels.begin(), clip.labels.end());
  }
  model.set_train(true);
  PooledEval out;
  auto ap = average_precision(scores, labels);
  out.ap = ap.value_or(std::numeric_limits<double>::quiet_NaN());
  out.f1 = f1_score(scores, labels);
  out.acc = accuracy(scores, labels);
  return out;
}

}  // namespace

std::vector<ClipSample> load_clips(const std::filesystem::path& root, Split split,
                                   const ModelConfig& cfg) {
  std::vector<ClipSample> clips;
  for (const auto& scene : load_dataset(root, split))
    for (int64_t t_end : eval_frame_indices(scene, cfg.T, cfg.eval_stride))
      clips.push_back(sample_clip(scene, t_end, cfg));
  return clips;
}

Checkpoint train_model(const std::vector<ClipSample>& train_clips,
                       const std::vector<ClipSample>& val_clips,
                       const ModelConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  RI_CHECK(!train_clips.empty(), "train_model: empty train split");
  const TrainConfig& tc = cfg.train;

  auto model = std::make_shared<ImportanceModel>(cfg, tc.seed);
  model->set_train(true);
  SgdOptimizer opt(model->named_parameters(), tc.momentum, tc.weight_decay);

  int64_t start_epoch = 0;
  std::vector<EpochStats> history;
  if (opts.resume) {
    opts.resume->install_into(*model);
    auto& vel = opt.momentum_buffers();
    RI_CHECK(opts.resume->momentum.size() == vel.size(),
             "resume: optimizer state count mismatch");
    for (size_t i = 0; i < vel.size(); ++i) {
      const auto& [sname, stensor] = opts.resume->momentum[i];
      RI_CHECK(vel[i].first == sname && vel[i].second.shape() == stensor.shape(),
               "resume: momentum buffer '" + sname + "' mismatch");
      vel[i].second.vec() = stensor.vec();
    }
    start_epoch = opts.resume->epochs_completed;
    history = opts.resume->history;
  }

  std::ofstream log;
  if (opts.log_csv) {
    log.open(*opts.log_csv, start_epoch > 0 ? std::ios::app : std::ios::out);
    RI_CHECK(log.good(), "cannot write training log: " + opts.log_csv->string());
    if (start_epoch == 0) log << "epoch,loss,ap,f1,acc,lr\n";
  }

  std::vector<size_t> order(train_clips.size());
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    const double lr =
        tc.lr * 0.5 *
        (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                        static_cast<double>(tc.epochs)));
    // The permutation depends on (seed, epoch) alone so a resumed run visits
    // clips in the same order as the uninterrupted one.
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(epoch_mix(tc.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    int64_t clip_count = 0;
    for (size_t start = 0; start < order.size(); start += tc.batch_size) {
      const size_t stop = std::min(order.size(), start + tc.batch_size);
      opt.zero_grad();
      Tensor batch_loss;
      for (size_t i = start; i < stop; ++i) {
        const ClipSample& clip = train_clips[order[i]];
        ImportanceScores scores = model->forward(clip);
        Tensor l = model->loss(scores, clip.labels);
        batch_loss = batch_loss.defined() ? add(batch_loss, l) : l;
      }
      batch_loss = mul_scalar(batch_loss, 1.0 / static_cast<double>(stop - start));
      const double lv = batch_loss.item();
      if (!std::isfinite(lv))
        throw std::runtime_error(
            "training diverged: non-finite loss at epoch " + std::to_string(epoch) +
            ", batch starting at clip " + std::to_string(start));
      loss_sum += lv * static_cast<double>(stop - start);
      clip_count += static_cast<int64_t>(stop - start);
      batch_loss.backward();
      opt.step(lr);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / static_cast<double>(clip_count);
    stats.lr = lr;
    if (!val_clips.empty()) {
      PooledEval ev = eval_clips(*model, val_clips);
      stats.ap = ev.ap;
      stats.f1 = ev.f1;
      stats.acc = ev.acc;
    }
    history.push_back(stats);
    if (log.is_open())
      log << stats.epoch << "," << stats.loss << "," << stats.ap << "," << stats.f1
          << "," << stats.acc << "," << stats.lr << "\n";
    if (opts.verbose)
      std::cerr << "[roadimp] epoch " << stats.epoch << " loss " << stats.loss
                << " AP " << stats.ap << " F1 " << stats.f1 << " Acc " << stats.acc
                << "\n";
    start_epoch = epoch + 1;
    if (opts.stop_ap && !val_clips.empty() && stats.ap >= *opts.stop_ap &&
        (!opts.stop_f1 || stats.f1 >= *opts.stop_f1))
      break;
    if (opts.stop_after_epochs && start_epoch >= *opts.stop_after_epochs) break;
  }

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.epochs_completed = start_epoch;
  for (const auto& [name, t] : model->named_parameters())
    ckpt.params.emplace_back(name, t.clone());
  for (const auto& [name, t] : model->named_buffers())
    ckpt.buffers.emplace_back(name, t.clone());
  for (const auto& [name, t] : opt.momentum_buffers())
    ckpt.momentum.emplace_back(name, t.clone());
  ckpt.history = history;
  return ckpt;
}

}  // namespace roadimp
