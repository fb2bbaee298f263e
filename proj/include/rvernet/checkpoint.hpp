// Parameter checkpoints: a little-endian uint64 header length, a JSON header
// listing (name, shape, offset) per parameter, then a flat little-endian f32
// payload. Offsets are element indices into the payload. Files are written
// through a temp path and renamed so readers never see partial output.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rvernet/common.hpp"
#include "rvernet/tensor.hpp"

namespace rvernet {

using NamedParams = std::vector<std::pair<std::string, Tensor<float>>>;

namespace detail {

inline void to_le_bytes(const float* src, size_t n, std::vector<char>& out) {
    out.resize(n * 4);
    std::memcpy(out.data(), src, n * 4);
    if constexpr (std::endian::native == std::endian::big) {
        for (size_t i = 0; i < n; ++i) std::swap(out[i * 4], out[i * 4 + 3]), std::swap(out[i * 4 + 1], out[i * 4 + 2]);
    }
}

inline void from_le_bytes(const char* src, size_t n, float* dst) {
    std::memcpy(dst, src, n * 4);
    if constexpr (std::endian::native == std::endian::big) {
        char* b = reinterpret_cast<char*>(dst);
        for (size_t i = 0; i < n; ++i) std::swap(b[i * 4], b[i * 4 + 3]), std::swap(b[i * 4 + 1], b[i * 4 + 2]);
    }
}

// Consumes the length word and header text, leaving `f` at the payload.
inline nlohmann::json read_header(std::ifstream& f, const std::string& path) {
    char lenbuf[8];
    f.read(lenbuf, 8);
    RV_CHECK_CFG(f.gcount() == 8, "checkpoint ", path, " is truncated");
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= (uint64_t)(unsigned char)lenbuf[i] << (8 * i);
    RV_CHECK_CFG(hlen > 0 && hlen < (1u << 26), "checkpoint ", path, " header length ", hlen,
                 " is implausible");
    std::string htext(hlen, '\0');
    f.read(htext.data(), (std::streamsize)hlen);
    RV_CHECK_CFG((uint64_t)f.gcount() == hlen, "checkpoint ", path, " is truncated");
    nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
    RV_CHECK_CFG(!header.is_discarded(), "checkpoint ", path, " has an unparseable header");
    return header;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& params,
                     const nlohmann::json& meta = nlohmann::json()) {
    nlohmann::json header;
    header["version"] = 1;
    header["dtype"] = "f32";
    if (meta.is_object() && !meta.empty()) header["meta"] = meta;
    auto& plist = header["params"] = nlohmann::json::array();
    int64_t offset = 0;
    std::vector<float> payload;
    for (auto& [name, t] : params) {
        nlohmann::json p;
        p["name"] = name;
        p["shape"] = t.shape();
        p["offset"] = offset;
        plist.push_back(std::move(p));
        for (T v : t.data()) payload.push_back((float)v);
        offset += t.numel();
    }
    std::string htext = header.dump();
    uint64_t hlen = htext.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = (char)((hlen >> (8 * i)) & 0xff);
    std::vector<char> bytes;
    detail::to_le_bytes(payload.data(), payload.size(), bytes);

    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        RV_CHECK_CFG(f.good(), "cannot open ", tmp, " for writing");
        f.write(lenbuf, 8);
        f.write(htext.data(), (std::streamsize)htext.size());
        f.write(bytes.data(), (std::streamsize)bytes.size());
        RV_CHECK_CFG(f.good(), "write failed for ", tmp);
    }
    std::filesystem::rename(tmp, path);
}

// Loads the whole file as fresh tensors keyed by parameter name.
template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    RV_CHECK_CFG(f.good(), "cannot open checkpoint ", path);
    nlohmann::json header = detail::read_header(f, path);
    RV_CHECK_CFG(header.value("dtype", "") == "f32", "checkpoint ", path,
                 " has unsupported dtype");

    std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                            std::istreambuf_iterator<char>());
    size_t n_floats = bytes.size() / 4;
    std::vector<float> payload(n_floats);
    detail::from_le_bytes(bytes.data(), n_floats, payload.data());

    std::map<std::string, Tensor<T>> out;
    for (auto& p : header.at("params")) {
        std::string name = p.at("name").get<std::string>();
        auto shape = p.at("shape").get<std::vector<int64_t>>();
        int64_t offset = p.at("offset").get<int64_t>();
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        RV_CHECK_CFG(offset >= 0 && offset + n <= (int64_t)n_floats, "checkpoint ", path,
                     ": parameter ", name, " overruns the payload");
        std::vector<T> data((size_t)n);
        for (int64_t i = 0; i < n; ++i) data[(size_t)i] = (T)payload[(size_t)(offset + i)];
        RV_CHECK_CFG(out.emplace(name, Tensor<T>(shape, std::move(data))).second,
                     "checkpoint ", path, ": duplicate parameter ", name);
    }
    return out;
}

// The optional architecture block a writer attached; an empty object when
// the file carries none.
inline nlohmann::json checkpoint_meta(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    RV_CHECK_CFG(f.good(), "cannot open checkpoint ", path);
    nlohmann::json header = detail::read_header(f, path);
    return header.contains("meta") ? header.at("meta") : nlohmann::json::object();
}

// Fills existing parameter tensors in place; every model parameter must be
// present with a matching shape, and the file must not hold extras.
template <typename T>
void load_checkpoint_into(const std::string& path,
                          std::vector<std::pair<std::string, Tensor<T>>>& params) {
    auto loaded = load_checkpoint<T>(path);
    for (auto& [name, t] : params) {
        auto it = loaded.find(name);
        RV_CHECK_CFG(it != loaded.end(), "checkpoint ", path, " is missing parameter ", name);
        RV_CHECK_CFG(it->second.shape() == t.shape(), "checkpoint ", path, ": parameter ",
                     name, " has shape ", shape_str(it->second.shape()), ", model expects ",
                     shape_str(t.shape()));
        t.mutable_data() = it->second.data();
        loaded.erase(it);
    }
    RV_CHECK_CFG(loaded.empty(), "checkpoint ", path, " holds ", loaded.size(),
                 " parameters the model does not have (first: ", loaded.begin()->first, ")");
}

}  // namespace rvernet
