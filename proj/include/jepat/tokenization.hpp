#pragma once

#include "jepat/hash.hpp"
#include "jepat/rng.hpp"
#include "jepat/tensor.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace jepat {

/// Pixel grid in [0,1], stored channels-first as a {c,h,w} tensor.
template <typename S>
struct ImageGrid {
    Index height = 0;
    Index width = 0;
    Index channels = 0;
    Tensor<S> pixels;

    static ImageGrid zeros(Index c, Index h, Index w) {
        return ImageGrid{h, w, c, Tensor<S>::zeros({c, h, w})};
    }

    S at(Index ch, Index y, Index x) const { return pixels.mat()(ch * height + y, x); }
    S& at(Index ch, Index y, Index x) { return pixels.mat()(ch * height + y, x); }
};

/// Cut the image into non-overlapping patch_size x patch_size patches, one
/// row per patch in raster order. Row layout is channel-major, then the
/// patch's own raster order; the map is a pure permutation of the pixels.
template <typename S>
Tensor<S> fold_image(const ImageGrid<S>& img, Index patch_size) {
    if (patch_size <= 0 || img.height % patch_size != 0 || img.width % patch_size != 0) {
        throw std::invalid_argument("fold_image: dims " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + " not divisible by patch size " +
                                    std::to_string(patch_size));
    }
    const Index gh = img.height / patch_size, gw = img.width / patch_size;
    const Index n = gh * gw;
    const Index d = img.channels * patch_size * patch_size;
    Tensor<S> out({n, d});
    for (Index gy = 0; gy < gh; ++gy) {
        for (Index gx = 0; gx < gw; ++gx) {
            const Index row = gy * gw + gx;
            Index col = 0;
            for (Index ch = 0; ch < img.channels; ++ch) {
                for (Index py = 0; py < patch_size; ++py) {
                    for (Index px = 0; px < patch_size; ++px) {
                        out(row, col++) = img.at(ch, gy * patch_size + py, gx * patch_size + px);
                    }
                }
            }
        }
    }
    return out;
}

/// Exact inverse of fold_image.
template <typename S>
ImageGrid<S> unfold_tokens(const Tensor<S>& tokens, Index patch_size, Index h, Index w, Index c) {
    const Index gh = h / patch_size, gw = w / patch_size;
    if (h % patch_size != 0 || w % patch_size != 0 || tokens.rows() != gh * gw ||
        tokens.cols() != c * patch_size * patch_size) {
        throw std::invalid_argument("unfold_tokens: tokens " + tokens.shape_str() + " do not describe a " +
                                    std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w) +
                                    " image at patch size " + std::to_string(patch_size));
    }
    ImageGrid<S> img = ImageGrid<S>::zeros(c, h, w);
    for (Index gy = 0; gy < gh; ++gy) {
        for (Index gx = 0; gx < gw; ++gx) {
            const Index row = gy * gw + gx;
            Index col = 0;
            for (Index ch = 0; ch < c; ++ch) {
                for (Index py = 0; py < patch_size; ++py) {
                    for (Index px = 0; px < patch_size; ++px) {
                        img.at(ch, gy * patch_size + py, gx * patch_size + px) = tokens(row, col++);
                    }
                }
            }
        }
    }
    return img;
}

inline std::string normalize_caption(const std::string& caption) {
    std::string out;
    out.reserve(caption.size());
    bool pending_space = false;
    for (char raw : caption) {
        const auto u = static_cast<unsigned char>(raw);
        if (std::isspace(u)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(u)));
    }
    return out;
}

inline std::vector<std::string> tokenize_caption(const std::string& caption) {
    std::istringstream is(normalize_caption(caption));
    std::vector<std::string> words;
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

/// Fixed word list with stable ids. Persisted as UTF-8 text, one token per line.
class Vocabulary {
public:
    explicit Vocabulary(std::vector<std::string> tokens, int max_caption_len = 16)
        : tokens_(std::move(tokens)), max_caption_len_(max_caption_len) {
        for (size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
    }

    /// Vocabulary built from the unique words of a caption list, sorted.
    static Vocabulary from_captions(const std::vector<std::string>& captions, int max_caption_len = 16) {
        std::vector<std::string> words;
        for (const auto& c : captions) {
            for (auto& w : tokenize_caption(c)) words.push_back(std::move(w));
        }
        std::sort(words.begin(), words.end());
        words.erase(std::unique(words.begin(), words.end()), words.end());
        return Vocabulary(std::move(words), max_caption_len);
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("vocabulary: cannot open " + path);
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) tokens.push_back(line);
        }
        return Vocabulary(std::move(tokens));
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("vocabulary: cannot write " + path);
        for (const auto& t : tokens_) out << t << "\n";
    }

    std::optional<int> id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
    size_t size() const { return tokens_.size(); }
    int max_caption_len() const { return max_caption_len_; }

    std::vector<int> encode(const std::string& caption) const {
        std::vector<int> out;
        for (const auto& w : tokenize_caption(caption)) {
            if (static_cast<int>(out.size()) >= max_caption_len_) break;
            auto i = id(w);
            out.push_back(i ? *i : -1);
        }
        return out;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int i : ids) {
            if (!out.empty()) out.push_back(' ');
            out += i < 0 ? std::string("<oov>") : token(i);
        }
        return out;
    }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
    int max_caption_len_;
};

/// Frozen caption embedder: a seeded table of unit-normalized rows, one per
/// vocabulary word plus a block of hash buckets for anything unseen. A
/// caption embeds to the mean of its word rows. Stands in for a pretrained
/// text encoder; never receives gradients.
template <typename S>
class TextStub {
public:
    TextStub(Vocabulary vocab, Index d_txt, uint64_t seed, int oov_buckets = 32)
        : vocab_(std::move(vocab)), d_txt_(d_txt), seed_(seed), oov_buckets_(oov_buckets) {
        Rng rng(seed);
        table_ = Tensor<S>({static_cast<Index>(vocab_.size()) + oov_buckets_, d_txt_});
        rng.fill_normal(table_);
        for (Index i = 0; i < table_.rows(); ++i) {
            const S norm = table_.mat().row(i).norm();
            if (norm > S(0)) table_.mat().row(i) /= norm;
        }
    }

    Tensor<S> embed(const std::string& caption) const {
        const auto words = tokenize_caption(caption);
        if (words.empty()) throw std::invalid_argument("embed_text: empty caption");
        Tensor<S> out({d_txt_});
        Index used = 0;
        for (const auto& w : words) {
            if (used >= vocab_.max_caption_len()) break;
            out.mat().row(0) += table_.mat().row(row_index(w));
            ++used;
        }
        out.mat() /= S(used);
        return out;
    }

    Tensor<S> row_for(const std::string& word) const {
        return Tensor<S>({d_txt_}, table_.mat().row(row_index(word)));
    }

    const Tensor<S>& table() const { return table_; }
    const Vocabulary& vocab() const { return vocab_; }
    Index d_txt() const { return d_txt_; }
    uint64_t seed() const { return seed_; }

    uint64_t checksum() const {
        return fnv1a64(table_.data(), static_cast<size_t>(table_.size()) * sizeof(S));
    }

private:
    Index row_index(const std::string& word) const {
        if (auto i = vocab_.id(word)) return static_cast<Index>(*i);
        const uint64_t h = fnv1a64(word.data(), word.size());
        return static_cast<Index>(vocab_.size()) + static_cast<Index>(h % static_cast<uint64_t>(oov_buckets_));
    }

    Vocabulary vocab_;
    Index d_txt_;
    uint64_t seed_;
    int oov_buckets_;
    Tensor<S> table_;
};

inline std::string label_to_caption(int class_id, const std::vector<std::string>& class_names) {
    if (class_id < 0 || static_cast<size_t>(class_id) >= class_names.size()) {
        throw std::out_of_range("label_to_caption: class id " + std::to_string(class_id) + " out of range (" +
                                std::to_string(class_names.size()) + " classes)");
    }
    return "a photo of a " + class_names[static_cast<size_t>(class_id)];
}

}  // namespace jepat
