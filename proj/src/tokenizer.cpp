#include "dpclip/tokenizer.hpp"

#include "dpclip/errors.hpp"

#include <algorithm>
#include <cctype>
#include <climits>
#include <fstream>
#include <set>

namespace dpclip {

namespace {

std::string utf8(int cp) {
    std::string s;
    if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return s;
}

bool is_letter_byte(unsigned char c) { return std::isalpha(c) || c >= 0x80; }

}  // namespace

std::vector<int> Tokenizer::encode_with_markers(const std::string& text, int context_length) const {
    std::vector<int> ids{sot()};
    const auto body = encode(text);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(eot());
    if (static_cast<int>(ids.size()) > context_length) {
        throw UsageError("text \"" + text + "\" needs " + std::to_string(ids.size()) +
                         " tokens, context length is " + std::to_string(context_length));
    }
    return ids;
}

std::vector<int> ByteTokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c) + 1);
    return ids;
}

BpeTokenizer::BpeTokenizer(const std::filesystem::path& merges_file, std::size_t max_merges) {
    std::ifstream in(merges_file);
    if (!in) throw DataError("cannot open BPE merges file '" + merges_file.string() + "'");
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::getline(in, line);  // version header
    while (merges.size() < max_merges && std::getline(in, line)) {
        const auto sp = line.find(' ');
        if (sp == std::string::npos) continue;
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    build(merges);
}

BpeTokenizer::BpeTokenizer(const std::vector<std::pair<std::string, std::string>>& merges) { build(merges); }

void BpeTokenizer::build(const std::vector<std::pair<std::string, std::string>>& merges) {
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<int> cs = bs;
    const std::set<int> printable(bs.begin(), bs.end());
    int n = 0;
    for (int b = 0; b < 256; ++b) {
        if (!printable.count(b)) {
            bs.push_back(b);
            cs.push_back(256 + n++);
        }
    }
    byte_encoder_.assign(256, "");
    std::vector<std::string> vocab;
    for (std::size_t i = 0; i < bs.size(); ++i) {
        byte_encoder_[static_cast<std::size_t>(bs[i])] = utf8(cs[i]);
        vocab.push_back(utf8(cs[i]));
    }
    const std::size_t base = vocab.size();
    for (std::size_t i = 0; i < base; ++i) vocab.push_back(vocab[i] + "</w>");
    for (std::size_t i = 0; i < merges.size(); ++i) {
        vocab.push_back(merges[i].first + merges[i].second);
        ranks_[merges[i]] = static_cast<int>(i);
    }
    vocab.emplace_back("<|startoftext|>");
    vocab.emplace_back("<|endoftext|>");
    for (std::size_t i = 0; i < vocab.size(); ++i) encoder_.emplace(vocab[i], static_cast<int>(i));
    sot_ = encoder_.at("<|startoftext|>");
    eot_ = encoder_.at("<|endoftext|>");
}

std::vector<std::string> BpeTokenizer::split_words(const std::string& text) {
    std::string s;
    s.reserve(text.size());
    for (unsigned char c : text) s.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));

    static const char* contractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (s.compare(i, 15, "<|startoftext|>") == 0 || s.compare(i, 13, "<|endoftext|>") == 0) {
            const std::size_t len = s[i + 2] == 's' ? 15 : 13;
            words.push_back(s.substr(i, len));
            i += len;
            continue;
        }
        bool matched = false;
        for (const char* k : contractions) {
            const std::size_t len = std::char_traits<char>::length(k);
            if (s.compare(i, len, k) == 0) {
                words.push_back(s.substr(i, len));
                i += len;
                matched = true;
                break;
            }
        }
        if (matched) continue;
        std::size_t j = i;
        if (is_letter_byte(c)) {
            while (j < s.size() && is_letter_byte(static_cast<unsigned char>(s[j]))) ++j;
        } else if (std::isdigit(c)) {
            j = i + 1;
        } else {
            while (j < s.size()) {
                const unsigned char d = static_cast<unsigned char>(s[j]);
                if (std::isspace(d) || is_letter_byte(d) || std::isdigit(d)) break;
                ++j;
            }
        }
        words.push_back(s.substr(i, j - i));
        i = j;
    }
    return words;
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& word) const {
    std::vector<std::string> parts;
    for (unsigned char c : word) parts.push_back(byte_encoder_[c]);
    if (parts.empty()) return parts;
    parts.back() += "</w>";
    while (parts.size() > 1) {
        int best_rank = INT_MAX;
        std::size_t best = 0;
        for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
            auto it = ranks_.find({parts[k], parts[k + 1]});
            if (it != ranks_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = k;
            }
        }
        if (best_rank == INT_MAX) break;
        // Merge every occurrence of the winning bigram, left to right.
        const std::string first = parts[best];
        const std::string second = parts[best + 1];
        std::vector<std::string> merged;
        for (std::size_t k = 0; k < parts.size();) {
            if (k + 1 < parts.size() && parts[k] == first && parts[k + 1] == second) {
                merged.push_back(first + second);
                k += 2;
            } else {
                merged.push_back(parts[k]);
                ++k;
            }
        }
        parts = std::move(merged);
    }
    return parts;
}

std::vector<int> BpeTokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
        if (w == "<|startoftext|>") {
            ids.push_back(sot_);
            continue;
        }
        if (w == "<|endoftext|>") {
            ids.push_back(eot_);
            continue;
        }
        for (const auto& piece : bpe(w)) {
            auto it = encoder_.find(piece);
            if (it == encoder_.end()) throw UsageError("BPE piece '" + piece + "' missing from vocabulary");
            ids.push_back(it->second);
        }
    }
    return ids;
}

std::unique_ptr<Tokenizer> make_tokenizer(bool pretrained, const std::string& merges_path) {
    if (!pretrained) return std::make_unique<ByteTokenizer>();
    if (merges_path.empty()) throw ConfigError("pretrained text tower requires bpe_vocab_path");
    return std::make_unique<BpeTokenizer>(merges_path);
}

}  // namespace dpclip
