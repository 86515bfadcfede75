#pragma once

#include "text2ct/nn.hpp"
#include "text2ct/prompt.hpp"

namespace text2ct {

struct TextEmbedding {
    Tensor tokens;              // (L, d); masked rows are zero
    std::vector<uint8_t> mask;  // length L, 1 = valid
    bool truncated = false;
    int valid_count() const {
        int n = 0;
        for (auto m : mask) n += m ? 1 : 0;
        return n;
    }
};

struct TextEncoderConfig {
    int dim = 64;
    int max_tokens = 128;
    int vocab = 512;
    std::string canonical() const;
};

// Desk-scale trainable encoder: hashed word-token embedding + fixed sinusoidal
// positional encoding. Trained jointly with the LDM, then frozen.
class TextEncoder {
  public:
    TextEncoder() = default;
    TextEncoder(const TextEncoderConfig& cfg, uint64_t init_seed);

    const TextEncoderConfig& config() const { return cfg_; }

    // Lowercase alphanumeric word tokens, FNV-hashed into the vocab.
    std::vector<int> tokenize(const std::string& text) const;

    TextEmbedding encode(const PromptBundle& prompt) const;
    TextEmbedding encode_text(const std::string& text) const;
    // All-masked marker; the UNet swaps in its learned unconditional row.
    TextEmbedding null_condition() const;

    // Training-side: propagate d_tokens into the embedding table.
    void backward_text(const std::string& text, const Tensor& d_tokens);

    void collect(std::vector<nn::Param*>& out);
    uint64_t fingerprint() const;  // config + weights

    nn::Embedding& embedding() { return embed_; }

  private:
    TextEmbedding embed_ids(const std::vector<int>& ids, bool truncated) const;
    TextEncoderConfig cfg_;
    nn::Embedding embed_;
    Tensor posenc_;  // (max_tokens, dim), fixed
};

}  // namespace text2ct
