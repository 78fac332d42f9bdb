#pragma once

// Byte-level tokenizer and the generic role-tagging chat template used by
// the micro-runtime. Ids 0..255 are raw bytes; four delimiter ids follow.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "plab/trace.hpp"

namespace plab {

using TokenId = std::uint32_t;

namespace tok {
inline constexpr TokenId kSystem = 256;
inline constexpr TokenId kUser = 257;
inline constexpr TokenId kAssistant = 258;
inline constexpr TokenId kEnd = 259;
inline constexpr std::uint32_t kMinVocab = 260;

std::vector<TokenId> encode(std::string_view text);
std::string decode(std::span<const TokenId> ids);
std::vector<std::uint32_t> special_ids();
TokenId marker_for(Role role);
}  // namespace tok

/// Token ids with their role and origin tags, as fed to the runtime.
struct TokenSeq {
  std::vector<TokenId> ids;
  std::vector<Role> roles;
  std::vector<Origin> origins;

  std::size_t size() const { return ids.size(); }
  void push(TokenId id, Role role, Origin origin = Origin::TeacherForced);
  void append(std::span<const TokenId> ids, Role role, Origin origin = Origin::TeacherForced);
  void append(const TokenSeq& other);
  TokenSeq prefix(std::size_t n) const;
};

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

struct Turn {
  Role role = Role::User;
  std::string text;
};

struct RenderedChat {
  TokenSeq tokens;
  std::vector<Span> content;  // text span of each turn, markers excluded
};

/// `<|role|> text <|end|>` per turn; with `open_assistant` a trailing
/// `<|assistant|>` marker opens the response field.
RenderedChat render_chat(const std::vector<Turn>& turns, bool open_assistant);

/// Places `response` according to the template condition: inside an opened
/// assistant turn, inside the user turn after the prompt, or as untagged
/// plain text following the prompt.
RenderedChat render_for_condition(TemplateCondition condition, const std::optional<std::string>& system,
                                  const std::string& prompt, const std::string& response);

}  // namespace plab
