#include "text2ct/text_encoder.hpp"

#include <cctype>
#include <cmath>

namespace text2ct {

std::string TextEncoderConfig::canonical() const {
    return strformat("dim=%d;max_tokens=%d;vocab=%d", dim, max_tokens, vocab);
}

TextEncoder::TextEncoder(const TextEncoderConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    Rng rng = Rng(init_seed).split("text_encoder");
    embed_.init("text_encoder.embed", cfg.vocab, cfg.dim, rng);

    posenc_ = Tensor({cfg.max_tokens, cfg.dim});
    float* pe = posenc_.data();
    for (int pos = 0; pos < cfg.max_tokens; pos++)
        for (int i = 0; i < cfg.dim; i++) {
            const double rate =
                std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(cfg.dim));
            const double a = pos * rate;
            pe[pos * cfg.dim + i] = static_cast<float>((i % 2 == 0) ? std::sin(a) : std::cos(a));
        }
}

std::vector<int> TextEncoder::tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        // ids 0..1 reserved (pad, unused); hash into the rest
        ids.push_back(2 + static_cast<int>(fnv1a64(word) % static_cast<uint64_t>(cfg_.vocab - 2)));
        word.clear();
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else
            flush();
    }
    flush();
    return ids;
}

TextEmbedding TextEncoder::embed_ids(const std::vector<int>& ids, bool truncated) const {
    TextEmbedding e;
    e.truncated = truncated;
    e.tokens = Tensor::zeros({cfg_.max_tokens, cfg_.dim});
    e.mask.assign(static_cast<size_t>(cfg_.max_tokens), 0);
    const float* table = embed_.table.w.data();
    const float* pe = posenc_.data();
    float* out = e.tokens.data();
    for (size_t i = 0; i < ids.size(); i++) {
        e.mask[i] = 1;
        const float* row = table + static_cast<int64_t>(ids[i]) * cfg_.dim;
        for (int j = 0; j < cfg_.dim; j++)
            out[i * static_cast<size_t>(cfg_.dim) + static_cast<size_t>(j)] =
                row[j] + pe[i * static_cast<size_t>(cfg_.dim) + static_cast<size_t>(j)];
    }
    return e;
}

TextEmbedding TextEncoder::encode_text(const std::string& text) const {
    std::vector<int> ids = tokenize(text);
    if (ids.empty()) throw ValidationError("encode_text: empty prompt");
    bool truncated = false;
    if (static_cast<int>(ids.size()) > cfg_.max_tokens) {
        ids.resize(static_cast<size_t>(cfg_.max_tokens));
        truncated = true;
    }
    return embed_ids(ids, truncated);
}

TextEmbedding TextEncoder::encode(const PromptBundle& prompt) const {
    prompt.validate();
    return encode_text(prompt.rendered);
}

TextEmbedding TextEncoder::null_condition() const {
    TextEmbedding e;
    e.tokens = Tensor::zeros({cfg_.max_tokens, cfg_.dim});
    e.mask.assign(static_cast<size_t>(cfg_.max_tokens), 0);
    return e;
}

void TextEncoder::backward_text(const std::string& text, const Tensor& d_tokens) {
    std::vector<int> ids = tokenize(text);
    if (static_cast<int>(ids.size()) > cfg_.max_tokens)
        ids.resize(static_cast<size_t>(cfg_.max_tokens));
    float* g = embed_.table.g.data();
    const float* d = d_tokens.data();
    for (size_t i = 0; i < ids.size(); i++)
        for (int j = 0; j < cfg_.dim; j++)
            g[static_cast<int64_t>(ids[i]) * cfg_.dim + j] +=
                d[i * static_cast<size_t>(cfg_.dim) + static_cast<size_t>(j)];
}

void TextEncoder::collect(std::vector<nn::Param*>& out) { embed_.collect(out); }

uint64_t TextEncoder::fingerprint() const {
    uint64_t h = fnv1a64(cfg_.canonical());
    h = fnv1a64(embed_.table.w.data(), static_cast<size_t>(embed_.table.w.numel()) * 4, h);
    return h;
}

}  // namespace text2ct
