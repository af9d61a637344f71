#pragma once

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by the special
// tokens. encode/decode is the identity on any byte string.

#include <stdexcept>
#include <string>
#include <vector>

namespace meet {

class Tokenizer {
public:
    static constexpr int kByteVocab = 256;
    static constexpr int kBos = 256;
    static constexpr int kEos = 257;
    static constexpr int kPad = 258;
    static constexpr int kControlBase = 259;  // reserved control-token id range

    explicit Tokenizer(int reserved_control_ids = 1) : n_control_(reserved_control_ids) {
        if (reserved_control_ids < 0) throw std::invalid_argument("tokenizer: negative control id count");
    }

    int vocab_size() const { return kControlBase + n_control_; }

    int control_id(int k) const {
        if (k < 0 || k >= n_control_) {
            throw std::invalid_argument("tokenizer: control id " + std::to_string(k) + " outside reserved range");
        }
        return kControlBase + k;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<int>(c));
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            if (id >= 0 && id < kByteVocab) {
                out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
            }
            // special tokens decode to nothing
        }
        return out;
    }

    static bool is_special(int id) { return id >= kByteVocab; }

private:
    int n_control_;
};

// Training/generation sequence policy: prompts open with BOS, responses close
// with EOS so the model learns where to stop.
inline std::vector<int> encode_prompt(const Tokenizer& tok, const std::string& text) {
    std::vector<int> ids{Tokenizer::kBos};
    const std::vector<int> body = tok.encode(text);
    ids.insert(ids.end(), body.begin(), body.end());
    return ids;
}

inline std::vector<int> encode_response(const Tokenizer& tok, const std::string& text) {
    std::vector<int> ids = tok.encode(text);
    ids.push_back(Tokenizer::kEos);
    return ids;
}

} // namespace meet
