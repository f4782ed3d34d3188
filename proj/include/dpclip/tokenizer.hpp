#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dpclip {

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    // Content tokens only, without start/end markers.
    virtual std::vector<int> encode(const std::string& text) const = 0;
    virtual int sot() const = 0;
    virtual int eot() const = 0;

    // [SOT, encode(text), EOT]; throws UsageError if longer than context_length.
    std::vector<int> encode_with_markers(const std::string& text, int context_length) const;
};

// Byte-level tokenizer for toy-scale text towers: token = byte + 1,
// SOT = 0, EOT = 257 (vocabulary of 258).
class ByteTokenizer final : public Tokenizer {
public:
    std::vector<int> encode(const std::string& text) const override;
    int sot() const override { return 0; }
    int eot() const override { return 257; }
};

// CLIP's byte-pair encoder, driven by the merges file distributed with the
// pretrained checkpoint (bpe_simple_vocab_16e6.txt, uncompressed).
class BpeTokenizer final : public Tokenizer {
public:
    // max_merges bounds how many merge rules are read (CLIP: 48894).
    explicit BpeTokenizer(const std::filesystem::path& merges_file, std::size_t max_merges = 48894);
    BpeTokenizer(const std::vector<std::pair<std::string, std::string>>& merges);

    std::vector<int> encode(const std::string& text) const override;
    int sot() const override { return sot_; }
    int eot() const override { return eot_; }
    std::size_t vocab_size() const { return encoder_.size(); }

    // Lowercased, whitespace-collapsed words in the CLIP pre-tokenisation.
    static std::vector<std::string> split_words(const std::string& text);

private:
    void build(const std::vector<std::pair<std::string, std::string>>& merges);
    std::vector<std::string> bpe(const std::string& word) const;

    std::vector<std::string> byte_encoder_;  // byte -> unicode (UTF-8)
    std::unordered_map<std::string, int> encoder_;
    std::map<std::pair<std::string, std::string>, int> ranks_;
    int sot_ = 0;
    int eot_ = 0;
};

std::unique_ptr<Tokenizer> make_tokenizer(bool pretrained, const std::string& merges_path);

}  // namespace dpclip
