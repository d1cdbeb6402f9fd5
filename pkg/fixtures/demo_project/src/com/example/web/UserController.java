package com.example.web;

import java.sql.Connection;
import java.sql.ResultSet;
import java.sql.Statement;
import javax.servlet.http.HttpServletRequest;
import javax.servlet.http.HttpServletResponse;

public class UserController {

    private Connection connection;

    @Audited
    public void handleLookup(HttpServletRequest request, HttpServletResponse response) {
        String name = request.getParameter("name");
        Statement stmt = connection.createStatement();
        String query = "SELECT * FROM users WHERE name = '" + name + "'";
        ResultSet rs = stmt.executeQuery(query);
        response.setHeader("X-Lookup", name);
    }
}
