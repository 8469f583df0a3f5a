#include "hadmst/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace hadmst {
namespace checkpoint {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'H', 'A', 'D', 'M', 'S', 'T', 'C', 'K'};

json param_manifest(const nn::ParamStore& ps) {
    json list = json::array();
    for (auto& name : ps.order()) {
        json e;
        e["name"] = name;
        e["shape"] = ps.get(name)->value.shape;
        list.push_back(e);
    }
    return list;
}

void write_params(std::ofstream& f, const nn::ParamStore& ps) {
    for (auto& name : ps.order()) {
        const Array& a = ps.get(name)->value;
        f.write((const char*)a.v.data(), (std::streamsize)(a.v.size() * sizeof(double)));
    }
}

void read_params(std::ifstream& f, const json& manifest, nn::ParamStore& ps,
                 const std::string& path, const char* net) {
    for (auto& e : manifest) {
        std::string name = e.at("name");
        std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        if (!ps.has(name))
            throw std::runtime_error("checkpoint " + path + ": unknown " + net +
                                     " parameter " + name);
        Array& dst = ps.get(name)->value;
        if (dst.shape != shape)
            throw std::runtime_error("checkpoint " + path + ": shape mismatch for " + name);
        f.read((char*)dst.v.data(), (std::streamsize)(dst.v.size() * sizeof(double)));
        if (!f)
            throw std::runtime_error("checkpoint " + path + ": truncated data at " + name);
    }
}

}  // namespace

void save(const std::string& path, const model::HadmstModel& m, const Meta& meta) {
    json header;
    header["version"] = 1;
    header["epoch"] = meta.epoch;
    header["gene_panel"] = meta.gene_panel;
    header["gen_params"] = param_manifest(m.gen_params());
    header["disc_params"] = param_manifest(m.disc_params());
    std::string htext = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint save: cannot open " + path);
    f.write(kMagic, 8);
    uint64_t hlen = htext.size();
    f.write((const char*)&hlen, 8);
    f.write(htext.data(), (std::streamsize)htext.size());
    write_params(f, m.gen_params());
    write_params(f, m.disc_params());
    if (!f) throw std::runtime_error("checkpoint save: write failed for " + path);
}

Meta load(const std::string& path, model::HadmstModel& m,
          const std::vector<std::string>& expected_panel) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint load: cannot open " + path);
    char magic[8];
    uint64_t hlen = 0;
    f.read(magic, 8);
    f.read((char*)&hlen, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint load: bad magic in " + path);
    std::string htext(hlen, '\0');
    f.read(htext.data(), (std::streamsize)hlen);
    if (!f) throw std::runtime_error("checkpoint load: truncated header in " + path);
    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint load: corrupt header in " + path + ": " +
                                 e.what());
    }
    Meta meta;
    meta.epoch = header.at("epoch");
    meta.gene_panel = header.at("gene_panel").get<std::vector<std::string>>();
    if (!expected_panel.empty() && meta.gene_panel != expected_panel)
        throw std::runtime_error("checkpoint load: gene panel mismatch in " + path +
                                 " (model was trained on a different panel)");
    read_params(f, header.at("gen_params"), m.gen_params(), path, "generator");
    read_params(f, header.at("disc_params"), m.disc_params(), path, "discriminator");
    return meta;
}

}  // namespace checkpoint
}  // namespace hadmst
