#pragma once

#include <iostream>
#include <vector>

#include "qtypemix/common.hpp"

namespace qtm {

// Disjoint assignment of agents to types. Type ids are dense in [0, m); a
// type may have no members in a given episode when rosters are drawn at
// reset, in which case its group is empty here and the mixers route zero.
struct TypePartition {
    int n = 0;  // agent count
    int m = 0;  // type count
    std::vector<int> assignment;            // agent id -> type id
    std::vector<std::vector<int>> groups;   // derived, disjoint, covering

    static TypePartition from_types(const std::vector<int>& agent_types, int m,
                                    bool allow_degenerate = false) {
        TypePartition p;
        p.n = static_cast<int>(agent_types.size());
        p.m = m;
        require<ConfigError>(p.n >= 1, "TypePartition: need at least one agent");
        require<ConfigError>(m >= 1, "TypePartition: need at least one type");
        if (!(m < p.n)) {
            require<ConfigError>(allow_degenerate, "TypePartition: type count ", m,
                                 " must be < agent count ", p.n,
                                 " (pass allow_degenerate for tests)");
            std::cerr << "[qtypemix] warning: degenerate type partition (m=" << m
                      << ", n=" << p.n << ")\n";
        }
        p.assignment = agent_types;
        p.groups.assign(static_cast<std::size_t>(m), {});
        for (int i = 0; i < p.n; ++i) {
            const int t = agent_types[static_cast<std::size_t>(i)];
            require<ConfigError>(t >= 0 && t < m, "TypePartition: agent ", i, " has type ", t,
                                 " outside [0, ", m, ")");
            p.groups[static_cast<std::size_t>(t)].push_back(i);
        }
        return p;
    }

    int type_of(int agent) const { return assignment[static_cast<std::size_t>(agent)]; }
};

// -1 when both agents share a type, +1 otherwise (so i == j gives -1).
inline int indicator(int i, int j, const TypePartition& p) {
    return p.type_of(i) == p.type_of(j) ? -1 : 1;
}

}  // namespace qtm
