#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace exitlab {

// Character-level vocabulary: id 0 is '\n', ids 1..95 are the printable ASCII
// characters ' '..'~'. Newline doubles as the end-of-answer stop token.
class CharTokenizer {
 public:
  static constexpr int kVocabSize = 96;
  static constexpr int kStopToken = 0;

  static bool encodable(char c) { return c == '\n' || (c >= ' ' && c <= '~'); }
  // Throws InputError on characters outside the alphabet.
  static std::vector<int> encode(std::string_view text);
  static std::string decode(const std::vector<int>& ids);
  static std::string token_text(int id);
};

enum class TaskFamily { Arithmetic, BeliefTracking };

std::string family_name(TaskFamily f);
TaskFamily parse_family(std::string_view name);

inline constexpr std::string_view kAnswerDelimiter = "A:";

struct TaskInstance {
  std::string prompt;  // ends with the answer delimiter
  std::string gold;
  TaskFamily family = TaskFamily::Arithmetic;
  std::uint64_t seed = 0;
  int operand_max = 0;
  int n_moves = 0;

  // Completion the model is trained to produce: " <gold>\n".
  std::string target_completion() const { return " " + gold + "\n"; }
  std::string full_text() const { return prompt + target_completion(); }
};

// "Q: a+b= A:" with a, b uniform in [0, operand_max].
std::vector<TaskInstance> gen_arithmetic(std::uint64_t seed, int n, int operand_max);

// Two-agent object-location stories; the question asks where one agent
// believes the object is. Agents only observe moves made while present.
std::vector<TaskInstance> gen_belief_tracking(std::uint64_t seed, int n, int n_moves);

std::vector<TaskInstance> generate(TaskFamily family, std::uint64_t seed, int n, int operand_max, int n_moves);

// 1 iff the text after the last answer delimiter (up to the first newline,
// trimmed, case-folded) equals the case-folded gold answer.
int verify(std::string_view completion, const TaskInstance& instance);

// One record per line: prompt \t gold \t family \t seed.
void save_dataset(const std::filesystem::path& path, const std::vector<TaskInstance>& instances);
std::vector<TaskInstance> load_dataset(const std::filesystem::path& path);

// Newline-delimited plain-text sequences.
std::vector<std::string> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<std::string>& records);

}  // namespace exitlab
