#include "plab/tokenizer.hpp"

#include <stdexcept>

namespace plab {

namespace tok {

std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string decode(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    switch (id) {
      case kSystem: out += "<|system|>"; break;
      case kUser: out += "<|user|>"; break;
      case kAssistant: out += "<|assistant|>"; break;
      case kEnd: out += "<|end|>"; break;
      default:
        if (id < 256) out.push_back(static_cast<char>(id));
        else out += "<|" + std::to_string(id) + "|>";
    }
  }
  return out;
}

std::vector<std::uint32_t> special_ids() { return {kSystem, kUser, kAssistant, kEnd}; }

TokenId marker_for(Role role) {
  switch (role) {
    case Role::System: return kSystem;
    case Role::User: return kUser;
    case Role::Assistant: return kAssistant;
    default: throw std::invalid_argument("untagged text has no turn marker");
  }
}

}  // namespace tok

void TokenSeq::push(TokenId id, Role role, Origin origin) {
  ids.push_back(id);
  roles.push_back(role);
  origins.push_back(origin);
}

void TokenSeq::append(std::span<const TokenId> more, Role role, Origin origin) {
  for (TokenId id : more) push(id, role, origin);
}

void TokenSeq::append(const TokenSeq& other) {
  ids.insert(ids.end(), other.ids.begin(), other.ids.end());
  roles.insert(roles.end(), other.roles.begin(), other.roles.end());
  origins.insert(origins.end(), other.origins.begin(), other.origins.end());
}

TokenSeq TokenSeq::prefix(std::size_t n) const {
  n = std::min(n, ids.size());
  TokenSeq out;
  out.ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
  out.roles.assign(roles.begin(), roles.begin() + static_cast<std::ptrdiff_t>(n));
  out.origins.assign(origins.begin(), origins.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

RenderedChat render_chat(const std::vector<Turn>& turns, bool open_assistant) {
  RenderedChat chat;
  for (const auto& turn : turns) {
    chat.tokens.push(tok::marker_for(turn.role), turn.role);
    const std::size_t begin = chat.tokens.size();
    chat.tokens.append(tok::encode(turn.text), turn.role);
    chat.content.push_back({begin, chat.tokens.size()});
    chat.tokens.push(tok::kEnd, turn.role);
  }
  if (open_assistant) chat.tokens.push(tok::kAssistant, Role::Assistant);
  return chat;
}

RenderedChat render_for_condition(TemplateCondition condition, const std::optional<std::string>& system,
                                  const std::string& prompt, const std::string& response) {
  std::vector<Turn> turns;
  if (system) turns.push_back({Role::System, *system});
  switch (condition) {
    case TemplateCondition::AssistantField: {
      turns.push_back({Role::User, prompt});
      RenderedChat chat = render_chat(turns, true);
      const std::size_t begin = chat.tokens.size();
      chat.tokens.append(tok::encode(response), Role::Assistant);
      chat.content.push_back({begin, chat.tokens.size()});
      return chat;
    }
    case TemplateCondition::UserField: {
      turns.push_back({Role::User, prompt + "\n\n" + response});
      RenderedChat chat = render_chat(turns, false);
      // The response occupies the tail of the user turn's text span.
      Span& user = chat.content.back();
      chat.content.push_back({user.end - response.size(), user.end});
      return chat;
    }
    case TemplateCondition::NoTemplate: {
      RenderedChat chat;
      const std::string lead = system ? *system + "\n\n" : std::string();
      const std::string text = lead + prompt + "\n\n" + response;
      chat.tokens.append(tok::encode(text), Role::Untagged);
      if (system) chat.content.push_back({0, system->size()});
      chat.content.push_back({lead.size(), lead.size() + prompt.size()});
      chat.content.push_back({chat.tokens.size() - response.size(), chat.tokens.size()});
      return chat;
    }
  }
  return {};
}

}  // namespace plab
