#include "groupalign/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>

namespace groupalign {

namespace {

constexpr const char* kMagic = "GROUPALIGN-CKPT v1";

void write_f64_le(std::ostream& os, double x) {
    auto bits = std::bit_cast<std::uint64_t>(x);
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(buf, 8);
}

double read_f64_le(std::istream& is) {
    char buf[8];
    is.read(buf, 8);
    if (!is) throw IoError("checkpoint: truncated data section");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

struct Entry {
    std::string name;
    std::vector<int> shape;
    std::uint64_t offset = 0;
};

// Reads the header, leaving the stream at the first data byte.
std::vector<Entry> read_manifest(std::ifstream& is, const std::string& path) {
    std::string line;
    if (!std::getline(is, line) || line != kMagic)
        throw IoError("checkpoint " + path + ": bad magic line");
    if (!std::getline(is, line)) throw IoError("checkpoint " + path + ": missing count");
    std::size_t count = 0;
    try {
        count = std::stoul(line);
    } catch (const std::exception&) {
        throw IoError("checkpoint " + path + ": bad count '" + line + "'");
    }
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        if (!std::getline(is, line)) throw IoError("checkpoint " + path + ": truncated manifest");
        std::istringstream row(line);
        int rank = 0;
        if (!(row >> e.name >> rank) || rank < 1 || rank > 2)
            throw IoError("checkpoint " + path + ": bad manifest row '" + line + "'");
        e.shape.resize(rank);
        for (int& d : e.shape)
            if (!(row >> d) || d <= 0)
                throw IoError("checkpoint " + path + ": bad manifest row '" + line + "'");
        if (!(row >> e.offset))
            throw IoError("checkpoint " + path + ": bad manifest row '" + line + "'");
    }
    if (!std::getline(is, line) || line != "DATA")
        throw IoError("checkpoint " + path + ": missing DATA separator");
    return entries;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedParams& params) {
    std::set<std::string> seen;
    for (const auto& [name, t] : params) {
        if (name.empty() || name.find(' ') != std::string::npos)
            throw ContractError("save_checkpoint: bad parameter name '" + name + "'");
        if (!seen.insert(name).second)
            throw ContractError("save_checkpoint: duplicate parameter name '" + name + "'");
        if (!t.defined()) throw ContractError("save_checkpoint: undefined tensor for '" + name + "'");
    }

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("save_checkpoint: cannot open " + path);

    os << kMagic << "\n" << params.size() << "\n";
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        os << name << " " << t.rank();
        for (int d : t.shape()) os << " " << d;
        os << " " << offset << "\n";
        offset += static_cast<std::uint64_t>(t.numel()) * 8;
    }
    os << "DATA\n";
    for (const auto& [name, t] : params)
        for (double x : t.data()) write_f64_le(os, x);
    os.flush();
    if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, NamedParams& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError("checkpoint not found: " + path);
    auto entries = read_manifest(is, path);
    std::streampos data_start = is.tellg();

    for (auto& [name, t] : params) {
        const Entry* found = nullptr;
        for (const auto& e : entries)
            if (e.name == name) {
                found = &e;
                break;
            }
        if (!found)
            throw MissingArtifactError("checkpoint " + path + ": no entry '" + name + "'");
        if (found->shape != t.shape())
            throw ContractError("checkpoint " + path + ": entry '" + name + "' has shape " +
                                shape_str(found->shape) + ", expected " + shape_str(t.shape()));
        is.clear();
        is.seekg(data_start + static_cast<std::streamoff>(found->offset));
        for (auto& x : t.data()) x = read_f64_le(is);
    }
}

std::vector<std::string> checkpoint_names(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError("checkpoint not found: " + path);
    auto entries = read_manifest(is, path);
    std::vector<std::string> names;
    names.reserve(entries.size());
    for (const auto& e : entries) names.push_back(e.name);
    return names;
}

}  // namespace groupalign
