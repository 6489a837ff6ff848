#include "feddg/synthdata.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;

namespace feddg {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr uint32_t kImgMagic = 0x4d494446;  // "FDIM" little-endian
constexpr uint32_t kLblMagic = 0x424c4446;  // "FDLB"

struct Ellipse {
    double cy, cx, ry, rx, rot;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double u = dx * std::cos(rot) + dy * std::sin(rot);
        const double v = -dx * std::sin(rot) + dy * std::cos(rot);
        return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    }
};

BinaryMask rasterize(const Ellipse& e, int n) {
    BinaryMask m(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            if (e.contains(y, x)) m.set(y, x, 1);
    return m;
}

bool area_ok(const BinaryMask& m) {
    const double frac = static_cast<double>(m.count()) / static_cast<double>(m.h * m.w);
    return frac >= 0.02 && frac <= 0.40;
}

bool subset_of(const BinaryMask& inner, const BinaryMask& outer) {
    for (size_t i = 0; i < inner.m.size(); ++i)
        if (inner.m[i] && !outer.m[i]) return false;
    return true;
}

uint64_t mix_seed(uint64_t seed, uint64_t domain_id) {
    // splitmix64 over the pair so nearby (seed, domain) values decorrelate
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (domain_id + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

void write_u32(std::ofstream& f, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    f.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_blob(const fs::path& path, uint32_t magic, int h, int w, int c,
                const std::vector<float>& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("synthdata: cannot write " + path.string());
    write_u32(f, magic);
    write_u32(f, static_cast<uint32_t>(h));
    write_u32(f, static_cast<uint32_t>(w));
    write_u32(f, static_cast<uint32_t>(c));
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

std::vector<float> read_blob(const fs::path& path, uint32_t magic, int& h, int& w, int& c) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("synthdata: missing file " + path.string());
    if (read_u32(f) != magic) throw std::runtime_error("synthdata: bad magic in " + path.string());
    h = static_cast<int>(read_u32(f));
    w = static_cast<int>(read_u32(f));
    c = static_cast<int>(read_u32(f));
    if (h <= 0 || w <= 0 || c <= 0 || h > 1 << 16 || w > 1 << 16 || c > 64)
        throw std::runtime_error("synthdata: implausible header in " + path.string());
    std::vector<float> data(static_cast<size_t>(h) * w * c);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!f) throw std::runtime_error("synthdata: truncated payload in " + path.string());
    return data;
}

}  // namespace

std::vector<SyntheticSample> make_domain(int domain_id, const DomainStyle& style, int n_samples,
                                         uint64_t seed, int img_size, int id_offset) {
    if (n_samples < 1) throw std::invalid_argument("make_domain: n_samples must be >= 1");
    if (!(style.contrast_gain > 0.0)) throw std::invalid_argument("make_domain: contrast_gain <= 0");
    if (style.noise_sigma < 0.0) throw std::invalid_argument("make_domain: noise_sigma < 0");
    const int n = img_size;
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(domain_id)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<SyntheticSample> out;
    out.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) {
        BinaryMask disc, cup;
        for (int attempt = 0;; ++attempt) {
            if (attempt > 200) throw std::runtime_error("make_domain: geometry rejection stuck");
            Ellipse outer;
            outer.cy = (0.35 + 0.30 * unit(rng)) * n;
            outer.cx = (0.35 + 0.30 * unit(rng)) * n;
            outer.ry = (0.14 + 0.18 * unit(rng)) * n;
            outer.rx = (0.14 + 0.18 * unit(rng)) * n;
            outer.rot = kPi * unit(rng);
            const double scale = 0.45 + 0.20 * unit(rng);
            Ellipse inner = outer;
            inner.ry *= scale;
            inner.rx *= scale;
            inner.cy += (unit(rng) - 0.5) * 0.25 * outer.ry;
            inner.cx += (unit(rng) - 0.5) * 0.25 * outer.rx;
            disc = rasterize(outer, n);
            cup = rasterize(inner, n);
            if (area_ok(disc) && area_ok(cup) && subset_of(cup, disc)) break;
        }

        const double tex_phase = 2.0 * kPi * unit(rng);
        const double tex_dir = 0.35;  // fixed orientation; frequency carries the shift
        std::normal_distribution<double> noise(0.0, style.noise_sigma);

        Image img(n, n, 1);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double canon = 0.25;
                if (cup.at(y, x))
                    canon = 0.9;
                else if (disc.at(y, x))
                    canon = 0.6;
                const double u = static_cast<double>(x) / (n - 1);
                const double v = static_cast<double>(y) / (n - 1);
                double val = style.intensity_bias + 0.5 + style.contrast_gain * (canon - 0.5);
                val += style.texture_amp *
                       std::sin(2.0 * kPi * style.texture_freq * (u * std::cos(tex_dir) + v * std::sin(tex_dir)) +
                                tex_phase);
                val += style.grad_dx * (u - 0.5) + style.grad_dy * (v - 0.5);
                if (style.noise_sigma > 0.0) val += noise(rng);
                img.at(y, x, 0) = static_cast<float>(val);
            }

        SyntheticSample sample;
        sample.image = std::move(img);
        sample.label = {std::move(disc), std::move(cup)};
        sample.domain_id = domain_id;
        sample.sample_id = id_offset + s;
        out.push_back(std::move(sample));
    }
    return out;
}

std::vector<DomainStyle> preset_styles() {
    // Four corners of (bias, contrast, texture, noise); calibrated so a
    // model trained on one domain drops noticeably on the others.
    return {
        {0.00, 1.00, 2.0, 0.10, 0.02, 0.15, 0.00},
        {0.30, 0.45, 5.0, 0.18, 0.06, -0.20, 0.10},
        {-0.25, 1.70, 9.0, 0.12, 0.10, 0.00, -0.25},
        {0.12, 0.30, 12.0, 0.25, 0.14, 0.30, 0.30},
    };
}

std::vector<Dataset> default_domain_suite(int k, uint64_t seed, const SynthConfig& cfg) {
    const auto styles = preset_styles();
    if (k < 2 || k > static_cast<int>(styles.size()))
        throw std::invalid_argument("default_domain_suite: K must be in [2, " +
                                    std::to_string(styles.size()) + "]");
    std::vector<Dataset> suite;
    for (int d = 0; d < k; ++d) {
        Dataset ds;
        ds.domain_id = d;
        ds.name = std::string(1, static_cast<char>('A' + d));
        ds.train = make_domain(d, styles[d], cfg.n_train, seed, cfg.img_size, 0);
        ds.test = make_domain(d, styles[d], cfg.n_test, seed + 0x517cc1b7ull, cfg.img_size, cfg.n_train);
        suite.push_back(std::move(ds));
    }
    return suite;
}

void save_dataset(const std::string& dir, const std::vector<Dataset>& suite) {
    fs::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& ds : suite) {
        auto dump = [&](const std::vector<SyntheticSample>& samples, const char* split) {
            for (const auto& s : samples) {
                const std::string name =
                    "d" + std::to_string(s.domain_id) + "_s" + std::to_string(s.sample_id);
                write_blob(fs::path(dir) / (name + ".img"), kImgMagic, s.image.h, s.image.w,
                           s.image.c, s.image.data);
                const int nc = static_cast<int>(s.label.size());
                std::vector<float> lbl(static_cast<size_t>(s.image.h) * s.image.w * nc);
                for (int y = 0; y < s.image.h; ++y)
                    for (int x = 0; x < s.image.w; ++x)
                        for (int c = 0; c < nc; ++c)
                            lbl[(static_cast<size_t>(y) * s.image.w + x) * nc + c] =
                                s.label[c].at(y, x) ? 1.f : 0.f;
                write_blob(fs::path(dir) / (name + ".lbl"), kLblMagic, s.image.h, s.image.w, nc, lbl);
                manifest.push_back({{"name", name},
                                    {"domain_id", s.domain_id},
                                    {"sample_id", s.sample_id},
                                    {"split", split}});
            }
        };
        dump(ds.train, "train");
        dump(ds.test, "test");
    }
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

std::vector<Dataset> load_external(const std::string& dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    if (!fs::exists(mpath))
        throw std::runtime_error("load_external: no manifest.json in " + dir);
    std::ifstream mf(mpath);
    nlohmann::json manifest;
    mf >> manifest;
    if (manifest.empty()) throw std::runtime_error("load_external: empty manifest in " + dir);

    std::map<int, Dataset> by_domain;
    for (const auto& entry : manifest) {
        const std::string name = entry.at("name");
        const int domain_id = entry.at("domain_id");
        const int sample_id = entry.at("sample_id");
        const std::string split = entry.at("split");

        int ih, iw, ic;
        auto img_data = read_blob(fs::path(dir) / (name + ".img"), kImgMagic, ih, iw, ic);
        const fs::path lpath = fs::path(dir) / (name + ".lbl");
        if (!fs::exists(lpath))
            throw std::runtime_error("load_external: missing label for sample " + name);
        int lh, lw, lc;
        auto lbl_data = read_blob(lpath, kLblMagic, lh, lw, lc);
        if (lh != ih || lw != iw)
            throw std::runtime_error("load_external: label shape mismatch for sample " + name);

        SyntheticSample s;
        s.image.h = ih;
        s.image.w = iw;
        s.image.c = ic;
        s.image.data = std::move(img_data);
        s.label.assign(lc, BinaryMask(lh, lw));
        for (int y = 0; y < lh; ++y)
            for (int x = 0; x < lw; ++x)
                for (int c = 0; c < lc; ++c)
                    if (lbl_data[(static_cast<size_t>(y) * lw + x) * lc + c] > 0.5f)
                        s.label[c].set(y, x, 1);
        s.domain_id = domain_id;
        s.sample_id = sample_id;

        auto& ds = by_domain[domain_id];
        ds.domain_id = domain_id;
        ds.name = std::string(1, static_cast<char>('A' + domain_id));
        (split == "test" ? ds.test : ds.train).push_back(std::move(s));
    }
    std::vector<Dataset> out;
    for (auto& [id, ds] : by_domain) out.push_back(std::move(ds));
    return out;
}

}  // namespace feddg
