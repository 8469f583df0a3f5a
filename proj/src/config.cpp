#include "hadmst/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace hadmst {
namespace config {

using nlohmann::json;

namespace {

json to_json(const TrainConfig& c) {
    json j;
    json m;
    m["genes"] = c.model.genes;
    m["hr_size"] = c.model.hr_size;
    m["lr_size"] = c.model.lr_size;
    m["T"] = c.model.T;
    m["beta_start"] = c.model.beta_start;
    m["beta_end"] = c.model.beta_end;
    m["d_lr"] = c.model.d_lr;
    m["d_cond"] = c.model.d_cond;
    m["t_embed"] = c.model.t_embed;
    m["unet_widths"] = c.model.unet_widths;
    m["d_gene"] = c.model.d_gene;
    m["gnn_layers"] = c.model.gnn_layers;
    m["disc_patch"] = c.model.disc_patch;
    json h;
    h["patch"] = c.model.hsd.patch;
    h["width"] = c.model.hsd.width;
    h["layers"] = c.model.hsd.layers;
    h["heads"] = c.model.hsd.heads;
    h["d_text"] = c.model.hsd.d_text;
    h["out_channels"] = c.model.hsd.out_channels;
    m["hsd"] = h;
    j["model"] = m;

    j["epochs"] = c.epochs;
    j["batch"] = c.batch;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["ema_decay"] = c.ema_decay;
    j["lambda_contrast"] = c.lambda_contrast;
    j["lambda_adv"] = c.lambda_adv;
    json ct;
    ct["lambda1"] = c.contrastive.lambda1;
    ct["lambda2"] = c.contrastive.lambda2;
    ct["tau"] = c.contrastive.tau;
    ct["margin"] = c.contrastive.margin;
    j["contrastive"] = ct;
    j["graph_threshold"] = c.graph_threshold;
    j["use_hsd_fusion"] = c.use_hsd_fusion;
    j["use_cmsa"] = c.use_cmsa;
    j["use_gdal"] = c.use_gdal;
    j["use_lr"] = c.use_lr;
    j["prompt"] = c.prompt;
    j["seed"] = c.seed;
    j["log_every"] = c.log_every;
    j["checkpoint_every"] = c.checkpoint_every;
    j["eval_tiles"] = c.eval_tiles;
    return j;
}

void from_json(const json& j, TrainConfig& c) {
    const json& m = j.at("model");
    c.model.genes = m.at("genes");
    c.model.hr_size = m.at("hr_size");
    c.model.lr_size = m.at("lr_size");
    c.model.T = m.at("T");
    c.model.beta_start = m.at("beta_start");
    c.model.beta_end = m.at("beta_end");
    c.model.d_lr = m.at("d_lr");
    c.model.d_cond = m.at("d_cond");
    c.model.t_embed = m.at("t_embed");
    c.model.unet_widths = m.at("unet_widths").get<std::vector<int>>();
    c.model.d_gene = m.at("d_gene");
    c.model.gnn_layers = m.at("gnn_layers");
    c.model.disc_patch = m.at("disc_patch");
    const json& h = m.at("hsd");
    c.model.hsd.patch = h.at("patch");
    c.model.hsd.width = h.at("width");
    c.model.hsd.layers = h.at("layers");
    c.model.hsd.heads = h.at("heads");
    c.model.hsd.d_text = h.at("d_text");
    c.model.hsd.out_channels = h.at("out_channels");

    c.epochs = j.at("epochs");
    c.batch = j.at("batch");
    c.lr = j.at("lr");
    c.weight_decay = j.at("weight_decay");
    c.ema_decay = j.at("ema_decay");
    c.lambda_contrast = j.at("lambda_contrast");
    c.lambda_adv = j.at("lambda_adv");
    const json& ct = j.at("contrastive");
    c.contrastive.lambda1 = ct.at("lambda1");
    c.contrastive.lambda2 = ct.at("lambda2");
    c.contrastive.tau = ct.at("tau");
    c.contrastive.margin = ct.at("margin");
    c.graph_threshold = j.at("graph_threshold");
    c.use_hsd_fusion = j.at("use_hsd_fusion");
    c.use_cmsa = j.at("use_cmsa");
    c.use_gdal = j.at("use_gdal");
    c.use_lr = j.at("use_lr");
    c.prompt = j.at("prompt");
    c.seed = j.at("seed");
    c.log_every = j.at("log_every");
    c.checkpoint_every = j.at("checkpoint_every");
    c.eval_tiles = j.at("eval_tiles");
}

// Rejects keys that do not exist in the reference schema; arrays are treated
// as scalar-valued leaves.
void check_keys(const json& candidate, const json& schema, const std::string& prefix) {
    if (!candidate.is_object()) return;
    for (auto& [key, val] : candidate.items()) {
        std::string full = prefix.empty() ? key : prefix + "." + key;
        if (!schema.is_object() || !schema.contains(key))
            throw std::invalid_argument("unknown config key: " + full);
        if (val.is_object()) check_keys(val, schema.at(key), full);
    }
}

void merge_into(json& base, const json& patch) {
    for (auto& [key, val] : patch.items()) {
        if (val.is_object() && base.contains(key) && base[key].is_object())
            merge_into(base[key], val);
        else
            base[key] = val;
    }
}

}  // namespace

std::string to_json_text(const TrainConfig& cfg) { return to_json(cfg).dump(2); }

TrainConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file: " + path);
    json user;
    try {
        f >> user;
    } catch (const json::exception& e) {
        throw std::invalid_argument("config parse error in " + path + ": " + e.what());
    }
    TrainConfig defaults;
    json base = to_json(defaults);
    check_keys(user, base, "");
    merge_into(base, user);
    TrainConfig out;
    from_json(base, out);
    return out;
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override must look like key=value: " + assignment);
    std::string key = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json base = to_json(cfg);
    // locate the dotted key
    json* node = &base;
    std::string part, walked;
    std::istringstream ks(key);
    std::vector<std::string> parts;
    while (std::getline(ks, part, '.')) parts.push_back(part);
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        walked += (walked.empty() ? "" : ".") + parts[i];
        if (!node->is_object() || !node->contains(parts[i]))
            throw std::invalid_argument("unknown config key: " + walked);
        node = &(*node)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!node->is_object() || !node->contains(leaf))
        throw std::invalid_argument("unknown config key: " + key);

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // plain string
    }
    (*node)[leaf] = parsed;
    try {
        from_json(base, cfg);
    } catch (const json::exception& e) {
        throw std::invalid_argument("bad value for config key " + key + ": " + e.what());
    }
}

void validate(const TrainConfig& c) {
    auto bad = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
    if (c.model.genes < 1) bad("model.genes must be >= 1");
    if (c.model.hr_size < 16 || c.model.hr_size % 16 != 0)
        bad("model.hr_size must be a positive multiple of 16");
    if (c.model.lr_size < 1 || c.model.lr_size > c.model.hr_size)
        bad("model.lr_size must be in [1, hr_size]");
    if (c.model.T < 1) bad("model.T must be >= 1");
    if (c.model.beta_start <= 0 || c.model.beta_end >= 1 ||
        c.model.beta_start > c.model.beta_end)
        bad("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    if (c.epochs < 1) bad("epochs must be >= 1");
    if (c.batch < 1) bad("batch must be >= 1");
    if (c.lr <= 0) bad("lr must be positive");
    if (c.ema_decay < 0 || c.ema_decay >= 1) bad("ema_decay must be in [0, 1)");
    if (c.lambda_contrast < 0 || c.lambda_adv < 0) bad("loss weights must be >= 0");
    if (c.contrastive.tau <= 0) bad("contrastive.tau must be positive");
    if (c.graph_threshold < 0 || c.graph_threshold > 1)
        bad("graph_threshold must be in [0, 1]");
    if (c.model.hr_size % c.model.disc_patch != 0)
        bad("model.disc_patch must divide model.hr_size");
    if (c.prompt.empty()) bad("prompt must not be empty");
    if (c.eval_tiles < 1) bad("eval_tiles must be >= 1");
}

}  // namespace config
}  // namespace hadmst
