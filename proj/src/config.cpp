#include "roadimp/config.hpp"

#include <fstream>
#include <json.hpp>

#include "roadimp/tensor.hpp"

namespace roadimp {

using nlohmann::json;

void TrainConfig::validate() const {
  RI_CHECK(lr >= 0.0, "train.lr must be >= 0");
  RI_CHECK(momentum >= 0.0 && momentum < 1.0, "train.momentum must be in [0,1)");
  RI_CHECK(weight_decay >= 0.0, "train.weight_decay must be >= 0");
  RI_CHECK(batch_size > 0, "train.batch_size must be positive");
  RI_CHECK(epochs > 0, "train.epochs must be positive");
}

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.T = 4;
  c.image_size = 64;
  c.roi_size = 4;
  c.C = 64;
  c.Cp = 32;
  c.tiny_strides = {2, 2, 1};  // stride 4 keeps small boxes above one cell
  return c;
}

void ModelConfig::validate() const {
  RI_CHECK(T >= 2, "T must be >= 2");
  RI_CHECK(image_size >= 8, "image_size must be >= 8");
  RI_CHECK(roi_size >= 1, "roi_size must be >= 1");
  RI_CHECK(C >= 4 && Cp >= 4, "C and C' must be >= 4");
  RI_CHECK(heads >= 1 && (2 * C) % heads == 0 && Cp % heads == 0,
           "heads must divide 2C and C'");
  RI_CHECK(b > a && a > 0.0, "mask values require b > a > 0");
  RI_CHECK(beta > 0.0, "beta must be positive");
  RI_CHECK(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
  RI_CHECK(soft_k > 0.0, "soft_k must be positive");
  RI_CHECK(backbone == "tiny" || backbone == "resnet18",
           "backbone must be tiny or resnet18");
  RI_CHECK(tiny_strides.size() == 3, "tiny_strides must list 3 stage strides");
  RI_CHECK(eval_stride >= 1, "eval_stride must be >= 1");
  train.validate();
}

namespace {

json to_json_obj(const ModelConfig& c) {
  json j;
  j["model"] = {{"T", c.T},
                {"image_size", c.image_size},
                {"roi_size", c.roi_size},
                {"C", c.C},
                {"Cp", c.Cp},
                {"heads", c.heads}};
  j["ofe"] = {{"backbone", c.backbone},
              {"tiny_strides", c.tiny_strides},
              {"backbone_bias", c.backbone_bias},
              {"use_spatial", c.use_spatial},
              {"use_temporal", c.use_temporal}};
  j["disg"] = {{"a", c.a},
               {"b", c.b},
               {"beta", c.beta},
               {"enabled", c.use_disg},
               {"use_semantics", c.use_semantics},
               {"use_intention", c.use_intention}};
  j["trg"] = {{"alpha", c.alpha},
              {"soft_k", c.soft_k},
              {"enabled", c.use_trg},
              {"use_interaction", c.use_interaction},
              {"use_weighting", c.use_weighting}};
  j["norm"] = {{"mean", c.norm_mean}, {"std", c.norm_std}};
  j["flow"] = {{"mag_scale", c.flow_mag_scale}};
  j["eval"] = {{"stride", c.eval_stride}};
  j["train"] = {{"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed},
                {"precision", c.train.precision}};
  return j;
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ModelConfig from_json_obj(const json& j) {
  ModelConfig c;
  if (j.contains("profile")) {
    const std::string p = j.at("profile").get<std::string>();
    if (p == "micro")
      c = ModelConfig::micro();
    else
      RI_CHECK(p == "default", "unknown profile '" + p + "'");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    read_if(m, "T", c.T);
    read_if(m, "image_size", c.image_size);
    read_if(m, "roi_size", c.roi_size);
    read_if(m, "C", c.C);
    read_if(m, "Cp", c.Cp);
    read_if(m, "heads", c.heads);
  }
  if (j.contains("ofe")) {
    const auto& m = j.at("ofe");
    read_if(m, "backbone", c.backbone);
    read_if(m, "tiny_strides", c.tiny_strides);
    read_if(m, "backbone_bias", c.backbone_bias);
    read_if(m, "use_spatial", c.use_spatial);
    read_if(m, "use_temporal", c.use_temporal);
  }
  if (j.contains("disg")) {
    const auto& m = j.at("disg");
    read_if(m, "a", c.a);
    read_if(m, "b", c.b);
    read_if(m, "beta", c.beta);
    read_if(m, "enabled", c.use_disg);
    read_if(m, "use_semantics", c.use_semantics);
    read_if(m, "use_intention", c.use_intention);
  }
  if (j.contains("trg")) {
    const auto& m = j.at("trg");
    read_if(m, "alpha", c.alpha);
    read_if(m, "soft_k", c.soft_k);
    read_if(m, "enabled", c.use_trg);
    read_if(m, "use_interaction", c.use_interaction);
    read_if(m, "use_weighting", c.use_weighting);
  }
  if (j.contains("norm")) {
    const auto& m = j.at("norm");
    read_if(m, "mean", c.norm_mean);
    read_if(m, "std", c.norm_std);
  }
  if (j.contains("flow")) read_if(j.at("flow"), "mag_scale", c.flow_mag_scale);
  if (j.contains("eval")) read_if(j.at("eval"), "stride", c.eval_stride);
  if (j.contains("train")) {
    const auto& m = j.at("train");
    read_if(m, "lr", c.train.lr);
    read_if(m, "momentum", c.train.momentum);
    read_if(m, "weight_decay", c.train.weight_decay);
    read_if(m, "batch_size", c.train.batch_size);
    read_if(m, "epochs", c.train.epochs);
    read_if(m, "seed", c.train.seed);
    read_if(m, "precision", c.train.precision);
  }
  if (j.contains("preset")) c.apply_preset(j.at("preset").get<std::string>());
  return c;
}

}  // namespace

std::string ModelConfig::to_json() const { return to_json_obj(*this).dump(2); }

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c = from_json_obj(j);
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream in(path);
  RI_CHECK(in.good(), "cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json(text);
}

void ModelConfig::save(const std::string& path) const {
  std::ofstream out(path);
  RI_CHECK(out.good(), "cannot write config file: " + path);
  out << to_json() << "\n";
}

void ModelConfig::apply_preset(const std::string& preset) {
  // Reset the switches a preset controls, then apply.
  use_disg = use_trg = true;
  use_semantics = use_intention = true;
  use_interaction = use_weighting = true;
  use_spatial = use_temporal = true;
  if (preset == "full") return;
  if (preset == "bu") {
    use_disg = use_trg = false;
  } else if (preset == "bu+trg") {
    use_disg = false;
  } else if (preset == "bu+disg") {
    use_trg = false;
  } else if (preset == "ofe-spatial") {
    use_temporal = false;
  } else if (preset == "ofe-temporal") {
    use_spatial = false;
  } else if (preset == "disg-semantics") {
    use_intention = false;
  } else if (preset == "disg-intention") {
    use_semantics = false;
  } else if (preset == "trg-interaction") {
    use_weighting = false;
  } else {
    fail("unknown ablation preset '" + preset + "'");
  }
}

std::vector<std::string> ModelConfig::preset_names() {
  return {"full",         "bu",           "bu+trg",        "bu+disg",
          "ofe-spatial",  "ofe-temporal", "disg-semantics", "disg-intention",
          "trg-interaction"};
}

}  // namespace roadimp
