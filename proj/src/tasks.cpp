#include "exitlab/tasks.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>

#include "exitlab/error.hpp"

namespace exitlab {

std::vector<int> CharTokenizer::encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) {
    if (!encodable(c)) throw InputError("character outside the tokenizer alphabet (code " +
                                        std::to_string(static_cast<unsigned char>(c)) + ")");
    ids.push_back(c == '\n' ? 0 : c - ' ' + 1);
  }
  return ids;
}

std::string CharTokenizer::decode(const std::vector<int>& ids) {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) s += token_text(id);
  return s;
}

std::string CharTokenizer::token_text(int id) {
  if (id < 0 || id >= kVocabSize) throw InputError("token id out of range: " + std::to_string(id));
  return std::string(1, id == 0 ? '\n' : static_cast<char>(' ' + id - 1));
}

std::string family_name(TaskFamily f) { return f == TaskFamily::Arithmetic ? "arithmetic" : "belief"; }

TaskFamily parse_family(std::string_view name) {
  if (name == "arithmetic") return TaskFamily::Arithmetic;
  if (name == "belief" || name == "belief-tracking") return TaskFamily::BeliefTracking;
  throw ConfigError("unknown task family: " + std::string(name));
}

std::vector<TaskInstance> gen_arithmetic(std::uint64_t seed, int n, int operand_max) {
  if (operand_max < 1) throw ConfigError("operand_max must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> operand(0, operand_max);
  std::vector<TaskInstance> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    const int a = operand(rng);
    const int b = operand(rng);
    TaskInstance t;
    t.prompt = "Q: " + std::to_string(a) + "+" + std::to_string(b) + "= A:";
    t.gold = std::to_string(a + b);
    t.family = TaskFamily::Arithmetic;
    t.seed = seed;
    t.operand_max = operand_max;
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

constexpr std::array<const char*, 4> kAgents = {"Ann", "Bob", "Cal", "Dee"};
constexpr std::array<const char*, 4> kObjects = {"key", "ball", "coin", "ring"};
constexpr std::array<const char*, 5> kPlaces = {"box", "bag", "cup", "jar", "tin"};

template <class Arr>
const char* pick(const Arr& arr, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, arr.size() - 1);
  return arr[d(rng)];
}

}  // namespace

std::vector<TaskInstance> gen_belief_tracking(std::uint64_t seed, int n, int n_moves) {
  if (n_moves < 1) throw ConfigError("n_moves must be at least 1");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<TaskInstance> out;
  for (int i = 0; i < n; ++i) {
    std::array<std::size_t, 4> order = {0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    const std::array<const char*, 2> agent = {kAgents[order[0]], kAgents[order[1]]};
    const char* obj = pick(kObjects, rng);

    std::array<bool, 2> present = {true, true};
    std::array<std::string, 2> belief;
    std::string location = pick(kPlaces, rng);
    std::ostringstream story;
    story << agent[0] << " and " << agent[1] << " are here. " << agent[0] << " puts " << obj << " in " << location
          << ".";
    belief = {location, location};

    for (int m = 0; m < n_moves; ++m) {
      if (coin(rng)) {
        const std::size_t who = coin(rng) ? 1 : 0;
        if (present[who] && present[1 - who]) {
          present[who] = false;
          story << " " << agent[who] << " leaves.";
        } else if (!present[who]) {
          present[who] = true;
          story << " " << agent[who] << " enters.";
        }
      }
      std::size_t mover = coin(rng) ? 1 : 0;
      if (!present[mover]) mover = 1 - mover;
      std::string dest;
      do dest = pick(kPlaces, rng);
      while (dest == location);
      location = dest;
      story << " " << agent[mover] << " moves " << obj << " to " << location << ".";
      for (std::size_t a = 0; a < 2; ++a)
        if (present[a]) belief[a] = location;
    }
    const std::size_t asked = coin(rng) ? 1 : 0;
    story << " Where does " << agent[asked] << " think " << obj << " is? A:";

    TaskInstance t;
    t.prompt = story.str();
    t.gold = belief[asked];
    t.family = TaskFamily::BeliefTracking;
    t.seed = seed;
    t.n_moves = n_moves;
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TaskInstance> generate(TaskFamily family, std::uint64_t seed, int n, int operand_max, int n_moves) {
  return family == TaskFamily::Arithmetic ? gen_arithmetic(seed, n, operand_max)
                                          : gen_belief_tracking(seed, n, n_moves);
}

namespace {

std::string normalize(std::string_view s) {
  auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  auto end = s.find_last_not_of(" \t\r");
  std::string out(s.substr(begin, end - begin + 1));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

int verify(std::string_view completion, const TaskInstance& instance) {
  const auto at = completion.rfind(kAnswerDelimiter);
  if (at == std::string_view::npos) return 0;
  std::string_view answer = completion.substr(at + kAnswerDelimiter.size());
  answer = answer.substr(0, answer.find('\n'));
  return normalize(answer) == normalize(instance.gold) ? 1 : 0;
}

void save_dataset(const std::filesystem::path& path, const std::vector<TaskInstance>& instances) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write dataset: " + path.string());
  for (const auto& t : instances)
    os << t.prompt << '\t' << t.gold << '\t' << family_name(t.family) << '\t' << t.seed << '\n';
}

std::vector<TaskInstance> load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read dataset: " + path.string());
  std::vector<TaskInstance> out;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
    if (fields.size() != 4) throw InputError("dataset record needs 4 tab-separated fields: " + line);
    TaskInstance t;
    t.prompt = fields[0];
    t.gold = fields[1];
    t.family = parse_family(fields[2]);
    t.seed = std::stoull(fields[3]);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read corpus: " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<std::string>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write corpus: " + path.string());
  for (const auto& r : records) os << r << '\n';
}

}  // namespace exitlab
