#include "geofuse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace geofuse {

void TrainConfig::validate() const {
    if (steps < 1) throw_contract_error("train.steps must be >= 1");
    if (batch_size < 1) throw_contract_error("train.batch_size must be >= 1");
    if (lr_peak <= 0.0) throw_contract_error("train.lr_peak must be positive");
    if (warmup_steps < 0 || warmup_steps > steps) {
        throw_contract_error("train.warmup_steps must lie in [0, steps]");
    }
    if (n_layers < 1) throw_contract_error("train.n_layers must be >= 1");
    if (heads < 1) throw_contract_error("train.heads must be >= 1");
    if (l_b < 1) throw_contract_error("train.l_b must be >= 1");
    if (eval_every < 1) throw_contract_error("train.eval_every must be >= 1");
    mask.validate();
}

ModelParams ModelParams::create(const SceneConfig& scene, const TrainConfig& train) {
    if (scene.c % train.heads != 0) {
        throw_contract_error("channel width " + std::to_string(scene.c) + " not divisible by " +
                             std::to_string(train.heads) + " heads");
    }
    FusionDims dims{scene.c, scene.c_g, train.heads, train.l_b};
    ModelParams p;
    p.fusion = FusionParams::create(train.family, train.variant, dims, train.seed);
    p.backbone = BackboneParams::create(scene.c, train.heads, train.n_layers, train.seed);
    return p;
}

ParamRefs ModelParams::refs() {
    ParamRefs out;
    fusion.collect(out);
    backbone.collect("backbone", out);
    return out;
}

PipelineSpec pipeline_spec(const TrainConfig& cfg) { return PipelineSpec{cfg.family, cfg.variant, cfg.mask}; }

Value sample_loss(ParamBinder& bind, ModelParams& model, const PipelineSpec& spec, const Sample& sample,
                  Rng* mask_rng, const std::optional<MaskOutcome>& forced_mask, FusedResult* fused_out) {
    FuseInputs in{&sample.vision, &sample.geometry, &sample.prompt};
    FusedResult fused = fuse_variant(bind, model.fusion, spec, in, mask_rng, forced_mask);
    Value logits = backbone_forward(bind, model.backbone, fused, sample.prompt);
    if (fused_out) *fused_out = std::move(fused);
    return bind.graph().cross_entropy_logits(logits, sample.label);
}

namespace {

int predict(ParamBinder& bind, ModelParams& model, const PipelineSpec& spec, const Sample& sample) {
    FuseInputs in{&sample.vision, &sample.geometry, &sample.prompt};
    FusedResult fused = fuse_variant(bind, model.fusion, spec, in, nullptr);
    Value logits = backbone_forward(bind, model.backbone, fused, sample.prompt);
    const Tensor& t = logits.tensor();
    return t.at(1) > t.at(0) ? 1 : 0;
}

PipelineSpec inference_spec(const PipelineSpec& spec) {
    PipelineSpec s = spec;
    s.mask.mode = MaskMode::Disabled;
    return s;
}

}  // namespace

double evaluate(ModelParams& model, const PipelineSpec& spec, std::span<const Sample> samples) {
    if (samples.empty()) throw_contract_error("evaluate: sample list is empty");
    const PipelineSpec infer = inference_spec(spec);
    int correct = 0;
    for (const Sample& s : samples) {
        Graph g;
        ParamBinder bind(g);
        if (predict(bind, model, infer, s) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainOutcome train(const SceneConfig& scene, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty() || data.test.empty()) throw_contract_error("train: datasets must be non-empty");
    PipelineSpec spec = pipeline_spec(cfg);
    spec.validate();

    TrainOutcome out{ModelParams::create(scene, cfg), {}, 0.0, 0.0};
    ModelParams& model = out.params;
    const ParamRefs refs = model.refs();
    Adam opt(cfg.adam);

    const int n_train = static_cast<int>(data.train.size());
    const int eval_n = std::min<int>(cfg.eval_samples, static_cast<int>(data.test.size()));
    out.history.reserve(static_cast<size_t>(cfg.steps));

    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng = Rng::keyed(cfg.seed, {kBatchStream, static_cast<uint64_t>(step)});
        std::map<std::string, Tensor> grads;
        double loss_sum = 0.0;
        for (int slot = 0; slot < cfg.batch_size; ++slot) {
            const Sample& sample = data.train[static_cast<size_t>(batch_rng.below(n_train))];
            Rng mask_rng = Rng::keyed(cfg.seed, {kMaskStream, static_cast<uint64_t>(step), static_cast<uint64_t>(slot)});
            Graph g;
            ParamBinder bind(g);
            Value loss = sample_loss(bind, model, spec, sample, &mask_rng);
            const double loss_val = loss.tensor().at(0);
            if (!std::isfinite(loss_val)) {
                throw TrainingDiverged("loss diverged at step " + std::to_string(step) + ", batch slot " +
                                       std::to_string(slot) + ", sample " + std::to_string(sample.index) +
                                       ", mask stream key (" + std::to_string(cfg.seed) + "," + std::to_string(step) +
                                       "," + std::to_string(slot) + ")");
            }
            loss_sum += loss_val;
            g.backward(loss);
            const double inv_batch = 1.0 / cfg.batch_size;
            for (const auto& [path, value] : bind.bound()) {
                if (!g.has_grad(value)) continue;
                const Tensor& grad = g.grad(value);
                Tensor& acc = grads.try_emplace(path, Tensor(grad.shape())).first->second;
                for (int i = 0; i < acc.size(); ++i) acc.at(i) += inv_batch * grad.at(i);
            }
        }
        const double lr = lr_at(cfg, step);
        opt.step(lr, refs, grads);

        HistoryRow row{step, lr, loss_sum / cfg.batch_size, std::nullopt};
        if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            row.eval_acc = evaluate(model, spec, std::span<const Sample>(data.test.data(), static_cast<size_t>(eval_n)));
        }
        out.history.push_back(row);
    }

    const int train_eval_n = std::min<int>(cfg.eval_samples, n_train);
    out.final_train_acc =
        evaluate(model, spec, std::span<const Sample>(data.train.data(), static_cast<size_t>(train_eval_n)));
    out.final_test_acc = evaluate(model, spec, std::span<const Sample>(data.test));
    return out;
}

void write_history_csv(const std::vector<HistoryRow>& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "step,lr,loss,eval_acc\n";
    char buf[40];
    for (const HistoryRow& row : history) {
        out << row.step << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", row.lr);
        out << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", row.loss);
        out << buf << ',';
        if (row.eval_acc) {
            std::snprintf(buf, sizeof(buf), "%.17g", *row.eval_acc);
            out << buf;
        }
        out << '\n';
    }
}

}  // namespace geofuse
