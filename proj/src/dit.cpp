#include "keytailor/dit.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "keytailor/errors.hpp"
#include "keytailor/ktsr.hpp"

namespace kt {

std::string ModelConfig::fingerprint_text() const {
    std::ostringstream os;
    os << "blocks=" << blocks << ";width=" << width << ";heads=" << heads << ";rank=" << rank;
    return os.str();
}

std::string AblationConfig::tag() const {
    std::string t;
    auto add = [&](bool on, const char* name) {
        if (on) t += std::string(t.empty() ? "" : ",") + name;
    };
    add(no_iks, "no-iks");
    add(no_distill, "no-distill");
    add(no_qkey, "no-qkey");
    add(no_keybg, "no-keybg");
    add(no_fusion, "no-fusion");
    add(no_cbdo, "no-cbdo");
    add(no_gdde, "no-gdde");
    add(keyframes_1, "keyframes-1");
    return t.empty() ? "full" : t;
}

// ---- DiTBlock -------------------------------------------------------------

namespace {
constexpr double kBaseSigma = 0.02;
constexpr double kLoraSigma = 0.02;
}  // namespace

DiTBlock::DiTBlock(const std::string& name, const ModelConfig& cfg, SeededRng& rng)
    : ln1(name + ".ln1", cfg.width, false),
      ln2(name + ".ln2", cfg.width, false),
      ln3(name + ".ln3", cfg.width, false),
      sq(name + ".sq", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      sk(name + ".sk", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      sv(name + ".sv", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      so(name + ".so", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      cq(name + ".cq", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      ck(name + ".ck", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      cv(name + ".cv", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      co(name + ".co", cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      f1(name + ".f1", cfg.width, 4 * cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      f2(name + ".f2", 4 * cfg.width, cfg.width, cfg.rank, rng, kBaseSigma, kLoraSigma),
      a_key(name + ".a_key", Tensor::gaussian(Shape{cfg.width, cfg.rank}, rng, kLoraSigma), true),
      b_key(name + ".b_key", Tensor(Shape{cfg.width, cfg.rank}), true) {}

Var DiTBlock::apply(Tape& tape, Var h, Var g, const std::optional<Var>& pooled, size_t heads) {
    // Self-attention with the keyframe query bias.
    Var a = ln1.apply(tape, h);
    Var q = sq.apply(tape, a);
    if (pooled) {
        Var prow = reshape(*pooled, Shape{1, pooled->value().size()});
        Var down = matmul(prow, tape.param(b_key), false, false);   // [1 x r]
        Var bias = matmul(down, tape.param(a_key), false, true);    // [1 x d]
        q = add_rowvec(q, reshape(bias, Shape{bias.value().size()}));
    }
    Var attn = attention(q, sk.apply(tape, a), sv.apply(tape, a), heads);
    h = add(h, so.apply(tape, attn));

    // Cross-attention: keys/values from the garment tokens.
    a = ln2.apply(tape, h);
    Var cattn = attention(cq.apply(tape, a), ck.apply(tape, g), cv.apply(tape, g), heads);
    h = add(h, co.apply(tape, cattn));

    // FFN.
    a = ln3.apply(tape, h);
    return add(h, f2.apply(tape, gelu(f1.apply(tape, a))));
}

void DiTBlock::collect_trainable(ParamList& out) {
    for (LoraLinear* l : {&sq, &sk, &sv, &so, &cq, &ck, &cv, &co, &f1, &f2}) l->collect(out);
    out.push_back(&a_key);
    out.push_back(&b_key);
}

void DiTBlock::collect_all(ParamList& out) {
    ln1.collect(out);
    ln2.collect(out);
    ln3.collect(out);
    for (LoraLinear* l : {&sq, &sk, &sv, &so, &cq, &ck, &cv, &co, &f1, &f2}) {
        out.push_back(&l->w0);
        out.push_back(&l->b0);
        l->collect(out);
    }
    out.push_back(&a_key);
    out.push_back(&b_key);
}

// ---- model ----------------------------------------------------------------

KeyTailorModel::KeyTailorModel(const ModelConfig& c, uint64_t seed) : cfg(c) {
    SeededRng rng(seed);
    size_t C = kLatentChannels, d = cfg.width;
    embed = Linear("embed", 2 * C, d, rng, 1.0 / std::sqrt(static_cast<double>(2 * C)), false);
    time_w = Parameter("time.w", Tensor::gaussian(Shape{d, d}, rng, kBaseSigma), false);
    time_b = Parameter("time.b", Tensor(Shape{d}), false);
    for (size_t b = 0; b < cfg.blocks; ++b)
        blocks.emplace_back("block" + std::to_string(b), cfg, rng);
    head_w = Parameter("head.w", Tensor::gaussian(Shape{C, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))),
                       false);
    head_b = Parameter("head.b", Tensor(Shape{C}), false);
    mask_guider = GuiderNet("mask_guider", 3, C, rng);
    pose_guider = GuiderNet("pose_guider", 3, C, rng);
    distill = DistillComponent(C);
    fusion = FusionComponent(C, rng);
    fixed_fusion = Parameter("fusion.fixed", Tensor::gaussian(Shape{C, 2 * C + 1}, rng, 0.02), false);
    for (size_t c2 = 0; c2 < C; ++c2) fixed_fusion.value.at2(c2, c2) = 1.0;
}

void KeyTailorModel::collect_trainable(ParamList& out) {
    for (DiTBlock& b : blocks) b.collect_trainable(out);
    mask_guider.collect(out);
    pose_guider.collect(out);
    distill.collect(out);
    fusion.collect(out);
}

void KeyTailorModel::collect_all(ParamList& out) {
    embed.collect(out);
    out.push_back(&time_w);
    out.push_back(&time_b);
    for (DiTBlock& b : blocks) b.collect_all(out);
    out.push_back(&head_w);
    out.push_back(&head_b);
    mask_guider.collect(out);
    pose_guider.collect(out);
    distill.collect(out);
    fusion.collect(out);
    out.push_back(&fixed_fusion);
}

uint64_t KeyTailorModel::base_checksum() const {
    ParamList all;
    const_cast<KeyTailorModel*>(this)->collect_all(all);
    uint64_t h = 1469598103934665603ull;
    for (Parameter* p : all) {
        if (p->trainable) continue;
        uint64_t c = checksum_f32(p->value);
        for (int i = 0; i < 8; ++i) {
            h ^= (c >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

// ---- flow matching --------------------------------------------------------

Tensor flow_interpolate(const Tensor& x0, const Tensor& x1, double t) {
    require_same_shape(x0, x1, "flow_interpolate");
    if (t < 0.0 || t > 1.0)
        throw usage_error("flow_interpolate: t=" + std::to_string(t) + " outside [0,1]");
    Tensor out(x0.shape);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] = t * x1.data[i] + (1.0 - t) * x0.data[i];
    return out;
}

Tensor target_velocity(const Tensor& x0, const Tensor& x1) {
    require_same_shape(x0, x1, "target_velocity");
    Tensor out(x0.shape);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] = x1.data[i] - x0.data[i];
    return out;
}

double sample_timestep(SeededRng& rng) {
    double z = rng.gaussian();
    return 1.0 / (1.0 + std::exp(-z));
}

// ---- checkpoint -----------------------------------------------------------

uint64_t fingerprint_hash(const std::string& text) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void save_checkpoint(const std::string& path, KeyTailorModel& model, const std::string& config_fp) {
    ParamList all;
    model.collect_all(all);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("save_checkpoint: cannot open " + path);
    os << "KTCP 1\n";
    os << "fingerprint " << std::hex << fingerprint_hash(config_fp) << std::dec << "\n";
    os << "params " << all.size() << "\n";
    for (Parameter* p : all) {
        os << p->name << '\t' << (p->trainable ? 1 : 0) << '\t';
        for (size_t i = 0; i < p->value.ndim(); ++i) os << (i ? " " : "") << p->value.shape[i];
        os << '\n';
    }
    os << "data\n";
    for (Parameter* p : all) ktsr_write(os, p->value);
    if (!os) throw io_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, KeyTailorModel& model, const std::string& config_fp) {
    ParamList all;
    model.collect_all(all);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("load_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "KTCP 1")
        throw format_error("load_checkpoint: bad header in " + path);
    if (!std::getline(is, line) || line.rfind("fingerprint ", 0) != 0)
        throw format_error("load_checkpoint: missing fingerprint line");
    uint64_t fp = std::stoull(line.substr(12), nullptr, 16);
    if (fp != fingerprint_hash(config_fp))
        throw format_error("load_checkpoint: config fingerprint mismatch (checkpoint was produced "
                           "with a different configuration)");
    if (!std::getline(is, line) || line.rfind("params ", 0) != 0)
        throw format_error("load_checkpoint: missing params line");
    size_t count = std::stoul(line.substr(7));
    if (count != all.size())
        throw format_error("load_checkpoint: parameter count mismatch: file has " +
                           std::to_string(count) + ", model has " + std::to_string(all.size()));
    for (Parameter* p : all) {
        if (!std::getline(is, line)) throw format_error("load_checkpoint: truncated header");
        std::istringstream ls(line);
        std::string name, shapes;
        int trainable = 0;
        std::getline(ls, name, '\t');
        ls >> trainable;
        if (name != p->name || trainable != (p->trainable ? 1 : 0))
            throw format_error("load_checkpoint: parameter '" + name + "' does not match model '" +
                               p->name + "'");
    }
    if (!std::getline(is, line) || line != "data")
        throw format_error("load_checkpoint: missing data marker");
    for (Parameter* p : all) {
        Tensor t = ktsr_read(is);
        if (t.shape != p->value.shape)
            throw format_error("load_checkpoint: shape mismatch for " + p->name + ": file " +
                               shape_str(t.shape) + " vs model " + shape_str(p->value.shape));
        p->value = std::move(t);
    }
}

}  // namespace kt
