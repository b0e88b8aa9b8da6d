#pragma once

#include <string>
#include <vector>

namespace subseg {

// Bidirectional mapping between parent classes {0..K} and subclasses
// {0..K_sub}. Background is never partitioned: subclass 0 <-> parent 0.
struct SubclassTable {
    std::vector<int> parent_of;                 // subclass id -> parent id
    std::vector<std::vector<int>> children_of;  // parent id -> sorted subclass ids

    int num_parents() const { return static_cast<int>(children_of.size()); }      // K+1
    int num_subclasses() const { return static_cast<int>(parent_of.size()); }     // K_sub+1

    // every parent keeps a single subclass equal to itself
    static SubclassTable identity(int num_parent_classes);
    static SubclassTable from_parent_of(std::vector<int> parent_of, int num_parent_classes);

    // totality, background fixity, mutual consistency, >=1 subclass per parent
    void validate() const;

    std::string to_text() const;                       // lines "subclass_id parent_id"
    static SubclassTable from_text(const std::string& text);
};

}  // namespace subseg
