#include "text2ct/serialize.hpp"

#include <cstdio>
#include <memory>

#include <nlohmann/json.hpp>

namespace text2ct {

namespace {
constexpr char kMagic[8] = {'T', '2', 'C', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
}  // namespace

void Checkpoint::save(const std::string& path) const {
    nlohmann::json hdr;
    hdr["kind"] = kind;
    hdr["meta"] = meta;
    nlohmann::json idx = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["dims"] = t.dims();
        e["offset"] = offset;
        offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
        idx.push_back(e);
    }
    hdr["tensors"] = idx;
    const std::string hs = hdr.dump();

    FilePtr f(fopen(path.c_str(), "wb"));
    if (!f) throw IOError("checkpoint save: cannot open " + path);
    uint64_t hlen = hs.size();
    if (fwrite(kMagic, 1, 8, f.get()) != 8 || fwrite(&kVersion, 4, 1, f.get()) != 1 ||
        fwrite(&hlen, 8, 1, f.get()) != 1 || fwrite(hs.data(), 1, hs.size(), f.get()) != hs.size())
        throw IOError("checkpoint save: header write failed for " + path);
    for (const auto& [name, t] : tensors) {
        const size_t n = static_cast<size_t>(t.numel());
        if (fwrite(t.data(), sizeof(float), n, f.get()) != n)
            throw IOError("checkpoint save: blob write failed for " + path);
    }
}

Checkpoint Checkpoint::load(const std::string& path) {
    FilePtr f(fopen(path.c_str(), "rb"));
    if (!f) throw MissingArtifactError("checkpoint load: cannot open " + path);
    char magic[8];
    uint32_t version = 0;
    uint64_t hlen = 0;
    if (fread(magic, 1, 8, f.get()) != 8 || memcmp(magic, kMagic, 8) != 0)
        throw IOError("checkpoint load: bad magic in " + path);
    if (fread(&version, 4, 1, f.get()) != 1 || version != kVersion)
        throw IOError("checkpoint load: unsupported version in " + path);
    if (fread(&hlen, 8, 1, f.get()) != 1) throw IOError("checkpoint load: truncated header");
    std::string hs(hlen, '\0');
    if (fread(hs.data(), 1, hlen, f.get()) != hlen)
        throw IOError("checkpoint load: truncated header json");
    nlohmann::json hdr = nlohmann::json::parse(hs);

    Checkpoint ck;
    ck.kind = hdr.value("kind", "");
    if (hdr.contains("meta"))
        ck.meta = hdr["meta"].get<std::map<std::string, std::string>>();
    for (const auto& e : hdr["tensors"]) {
        std::vector<int64_t> dims = e["dims"].get<std::vector<int64_t>>();
        Tensor t(dims);
        const size_t n = static_cast<size_t>(t.numel());
        if (fread(t.data(), sizeof(float), n, f.get()) != n)
            throw IOError("checkpoint load: truncated blob " + e["name"].get<std::string>());
        ck.tensors.emplace(e["name"].get<std::string>(), std::move(t));
    }
    return ck;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IOError("checkpoint: missing tensor " + name);
    return it->second;
}

std::string Checkpoint::meta_or(const std::string& key, const std::string& fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
}

}  // namespace text2ct
