#pragma once

#include <map>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "text2ct/tensor.hpp"

namespace text2ct {

// Checkpoint container: magic + version + JSON header + raw float32 blobs.
// `meta` carries the producing config and fingerprints; loaders must verify
// them before use.
struct Checkpoint {
    std::string kind;  // "autoencoder", "ldm", "align", ...
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> meta;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    const Tensor& tensor(const std::string& name) const;
    std::string meta_or(const std::string& key, const std::string& fallback) const;
};

}  // namespace text2ct
